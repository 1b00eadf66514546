#pragma once

#include "cscr/common.hpp"
#include "cscr/dataio.hpp"
#include "cscr/descriptors.hpp"
#include "cscr/cost_spectrum.hpp"
#include "cscr/encoder.hpp"
#include "cscr/cs_infonce.hpp"
#include "cscr/flat_index.hpp"
#include "cscr/router.hpp"
#include "cscr/eval.hpp"
#include "cscr/synth.hpp"
