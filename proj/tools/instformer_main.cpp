#include <string>
#include <vector>

#include "instformer/cli/commands.hpp"

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return instformer::cli::run(args);
}
