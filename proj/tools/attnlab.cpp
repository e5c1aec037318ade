#include <string>
#include <vector>

#include "attnlab/cli.hpp"

int main(int argc, char** argv) {
  return attnlab::cli::main(std::vector<std::string>(argv, argv + argc));
}
