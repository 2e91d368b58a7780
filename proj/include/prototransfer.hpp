#pragma once

#include "prototransfer/augment.hpp"
#include "prototransfer/backbone.hpp"
#include "prototransfer/checkpoint.hpp"
#include "prototransfer/config.hpp"
#include "prototransfer/data.hpp"
#include "prototransfer/errors.hpp"
#include "prototransfer/eval.hpp"
#include "prototransfer/fewshot.hpp"
#include "prototransfer/gradcheck.hpp"
#include "prototransfer/image.hpp"
#include "prototransfer/netcheck.hpp"
#include "prototransfer/ops.hpp"
#include "prototransfer/protoclr.hpp"
#include "prototransfer/rng.hpp"
#include "prototransfer/runtime.hpp"
#include "prototransfer/tape.hpp"
#include "prototransfer/tensor.hpp"
