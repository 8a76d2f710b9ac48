#pragma once

#include "asrl/adam.hpp"
#include "asrl/augment.hpp"
#include "asrl/distill.hpp"
#include "asrl/envs.hpp"
#include "asrl/error.hpp"
#include "asrl/gradcheck.hpp"
#include "asrl/harness.hpp"
#include "asrl/image.hpp"
#include "asrl/network.hpp"
#include "asrl/pagrad.hpp"
#include "asrl/params.hpp"
#include "asrl/ppo.hpp"
#include "asrl/rng.hpp"
#include "asrl/scheduler.hpp"
#include "asrl/serialize.hpp"
