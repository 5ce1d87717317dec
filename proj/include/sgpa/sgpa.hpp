#pragma once

#include "sgpa/errors.hpp"
#include "sgpa/linalg.hpp"
#include "sgpa/autodiff.hpp"
#include "sgpa/parameters.hpp"
#include "sgpa/optim.hpp"
#include "sgpa/gradcheck.hpp"
#include "sgpa/random.hpp"
#include "sgpa/kernels.hpp"
#include "sgpa/svgp.hpp"
#include "sgpa/attention.hpp"
#include "sgpa/transformer.hpp"
#include "sgpa/metrics.hpp"
#include "sgpa/data.hpp"
#include "sgpa/train.hpp"
#include "sgpa/checkpoint.hpp"
#include "sgpa/config.hpp"
#include "sgpa/cli.hpp"
