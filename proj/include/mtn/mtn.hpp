#pragma once

#include "mtn/attention.hpp"
#include "mtn/checkpoint.hpp"
#include "mtn/data.hpp"
#include "mtn/decoding.hpp"
#include "mtn/metrics.hpp"
#include "mtn/model.hpp"
#include "mtn/pointer.hpp"
#include "mtn/random.hpp"
#include "mtn/tensor.hpp"
#include "mtn/training.hpp"
