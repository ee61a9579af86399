#include "msae/cli.hpp"

#include <iostream>

int main(int argc, char** argv) { return msae::cli::run(argc, argv, std::cout, std::cerr); }
