// Umbrella header.
#pragma once

#include "organpool/core.hpp"
#include "organpool/lattice.hpp"
#include "organpool/masks.hpp"
#include "organpool/heads.hpp"
#include "organpool/training.hpp"
#include "organpool/evalcal.hpp"
#include "organpool/io.hpp"
#include "organpool/dataset.hpp"
#include "organpool/synth.hpp"
#include "organpool/experiment.hpp"
