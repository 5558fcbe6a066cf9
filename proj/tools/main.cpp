#include "commands.hpp"

int main(int argc, char** argv) {
  return metapoison::cli::run(std::vector<std::string>(argv + 1, argv + argc));
}
