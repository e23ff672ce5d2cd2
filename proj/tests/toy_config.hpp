#pragma once

#include "skiptune/unet.hpp"

namespace testutil {

inline skiptune::UNetConfig toy_unet(skiptune::GroupAlignment alignment = skiptune::GroupAlignment::straddling) {
    skiptune::UNetConfig c;
    c.input_channels = 1;
    c.image_size = 8;
    c.base_channels = 8;
    c.depth = 3;
    c.blocks_per_resolution = 1;
    c.groupnorm_groups = 4;
    c.time_embedding_dim = 16;
    c.group_alignment = alignment;
    return c;
}

}  // namespace testutil
