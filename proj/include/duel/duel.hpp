/// Single include for the whole library.
#pragma once

#include "duel/core.hpp"
#include "duel/denoiser.hpp"
#include "duel/engine.hpp"
#include "duel/errors.hpp"
#include "duel/io.hpp"
#include "duel/metrics.hpp"
#include "duel/oracle.hpp"
#include "duel/rng.hpp"
#include "duel/rules.hpp"
#include "duel/trainable.hpp"
#include "duel/verify.hpp"
