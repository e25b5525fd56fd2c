#include <iostream>
#include <string>
#include <vector>

#include "awm/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return awm::run_cli(args, std::cout, std::cerr);
}
