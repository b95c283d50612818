#pragma once

#include "cadg/attention.hpp"
#include "cadg/checkpoint.hpp"
#include "cadg/data.hpp"
#include "cadg/gradcheck.hpp"
#include "cadg/model.hpp"
#include "cadg/ops.hpp"
#include "cadg/optim.hpp"
#include "cadg/settings.hpp"
#include "cadg/tensor.hpp"
#include "cadg/train.hpp"
