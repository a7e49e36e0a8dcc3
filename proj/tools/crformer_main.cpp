#include <iostream>
#include <string>
#include <vector>

#include "crformer/cli.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return crformer::run_cli(args, std::cout, std::cerr);
}
