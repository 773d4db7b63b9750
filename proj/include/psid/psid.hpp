#pragma once

// Convenience umbrella for the whole library.

#include "psid/config.hpp"
#include "psid/diffusion.hpp"
#include "psid/image_io.hpp"
#include "psid/losses.hpp"
#include "psid/metrics.hpp"
#include "psid/model.hpp"
#include "psid/noise.hpp"
#include "psid/nn.hpp"
#include "psid/pse.hpp"
#include "psid/rng.hpp"
#include "psid/sampling.hpp"
#include "psid/spiformer.hpp"
#include "psid/tensor.hpp"
#include "psid/training.hpp"
