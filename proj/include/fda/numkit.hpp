#pragma once

#include "fda/numkit/linalg.hpp"
#include "fda/numkit/matrix.hpp"
#include "fda/numkit/random.hpp"
