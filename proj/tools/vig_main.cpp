#include "vig/cli.hpp"

int main(int argc, char** argv) { return vig::cli::run(argc, argv); }
