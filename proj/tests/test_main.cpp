#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include <torch/torch.h>

int main(int argc, char** argv) {
    at::set_num_threads(1);
    doctest::Context ctx(argc, argv);
    return ctx.run();
}
