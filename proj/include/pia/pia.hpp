#pragma once

#include "pia/tensor.hpp"
#include "pia/tape.hpp"
#include "pia/ops.hpp"
#include "pia/gradcheck.hpp"
#include "pia/rng.hpp"
#include "pia/hash.hpp"
#include "pia/image_io.hpp"
#include "pia/encoder.hpp"
#include "pia/dbdl.hpp"
#include "pia/bpl.hpp"
#include "pia/synthbench.hpp"
#include "pia/checkpoint.hpp"
#include "pia/model.hpp"
#include "pia/evalkit.hpp"
#include "pia/trainer.hpp"
#include "pia/gradsuite.hpp"
#include "pia/config.hpp"
