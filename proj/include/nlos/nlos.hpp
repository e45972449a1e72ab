// Copyright Contributors to the nlos project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "nlos/encoder.hpp"
#include "nlos/field.hpp"
#include "nlos/gradcheck.hpp"
#include "nlos/image.hpp"
#include "nlos/io.hpp"
#include "nlos/learn.hpp"
#include "nlos/parallel.hpp"
#include "nlos/render.hpp"
#include "nlos/rng.hpp"
#include "nlos/scan.hpp"
#include "nlos/scene.hpp"
#include "nlos/sim.hpp"
#include "nlos/tensor.hpp"
#include "nlos/vec3.hpp"
#include "nlos/wave.hpp"
