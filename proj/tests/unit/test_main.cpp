#define DOCTEST_CONFIG_IMPLEMENT
#include "check.hpp"

#include <torch/torch.h>

int main(int argc, char** argv) {
    torch::set_num_threads(1);
    doctest::Context ctx;
    ctx.applyCommandLine(argc, argv);
    return ctx.run();
}
