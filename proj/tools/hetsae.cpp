#include "hetsae/cli.hpp"

int main(int argc, char** argv) { return hetsae::cli::run(argc, argv); }
