#include <iostream>

#include "patchlens/cli.hpp"

int main(int argc, char** argv) {
    return patchlens::run_cli(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}
