#pragma once

#include "firtree/artifact.hpp"
#include "firtree/error.hpp"
#include "firtree/estimation.hpp"
#include "firtree/fuzzy.hpp"
#include "firtree/optimizer.hpp"
#include "firtree/parallel.hpp"
#include "firtree/ratings.hpp"
#include "firtree/sgr.hpp"
#include "firtree/tree.hpp"
