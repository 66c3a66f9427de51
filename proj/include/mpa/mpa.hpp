#pragma once

#include "mpa/bounds.hpp"
#include "mpa/csv.hpp"
#include "mpa/error.hpp"
#include "mpa/experiment.hpp"
#include "mpa/labelstats.hpp"
#include "mpa/norms.hpp"
#include "mpa/parallel.hpp"
#include "mpa/serialization.hpp"
#include "mpa/stats.hpp"
#include "mpa/tinynet.hpp"
#include "mpa/transfer.hpp"
