#pragma once

#include "fda/netmodel/block.hpp"
#include "fda/netmodel/graph.hpp"
#include "fda/netmodel/io.hpp"
