#pragma once

#include "advclr/tensor.hpp"
#include "advclr/tape.hpp"
#include "advclr/ops.hpp"
#include "advclr/gradcheck.hpp"
#include "advclr/model_check.hpp"
#include "advclr/data.hpp"
#include "advclr/model.hpp"
#include "advclr/checkpoint.hpp"
#include "advclr/losses.hpp"
#include "advclr/attack.hpp"
#include "advclr/optim.hpp"
#include "advclr/train.hpp"
#include "advclr/eval.hpp"
#include "advclr/config.hpp"
