// Copyright 2026 The soekit Authors
// SPDX-License-Identifier: Apache-2.0

// Everything in one include.
#ifndef SOEKIT_SOEKIT_HPP
#define SOEKIT_SOEKIT_HPP

#include "soekit/checkpoint.hpp"
#include "soekit/config.hpp"
#include "soekit/data.hpp"
#include "soekit/distill.hpp"
#include "soekit/image.hpp"
#include "soekit/lora.hpp"
#include "soekit/loss.hpp"
#include "soekit/metrics.hpp"
#include "soekit/nets.hpp"
#include "soekit/ops.hpp"
#include "soekit/optim.hpp"
#include "soekit/rng.hpp"
#include "soekit/schedule.hpp"
#include "soekit/tensor.hpp"
#include "soekit/vocab.hpp"

#endif  // SOEKIT_SOEKIT_HPP
