#pragma once

#include "lidarmerge/config.hpp"
#include "lidarmerge/core.hpp"
#include "lidarmerge/dataspace.hpp"
#include "lidarmerge/geometry.hpp"
#include "lidarmerge/gradcheck.hpp"
#include "lidarmerge/io.hpp"
#include "lidarmerge/labelspace.hpp"
#include "lidarmerge/losses.hpp"
#include "lidarmerge/metrics.hpp"
#include "lidarmerge/panoptic.hpp"
