#include "miat/cli.hpp"

int main(int argc, char** argv) { return miat::cli::run(argc, argv); }
