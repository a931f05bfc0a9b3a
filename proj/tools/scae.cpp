#include <iostream>

#include "scae/cli.hpp"

int main(int argc, char** argv) { return scae::cli::run(argc, argv, std::cout, std::cerr); }
