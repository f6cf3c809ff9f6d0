#include "iclab/cli.hpp"

int main(int argc, char** argv) {
  return iclab::cli_main(std::vector<std::string>(argv + 1, argv + argc));
}
