#include <string>
#include <vector>

#include "advclr/cli.hpp"

int main(int argc, char** argv) {
  return advclr::run_cli(std::vector<std::string>(argv + 1, argv + argc));
}
