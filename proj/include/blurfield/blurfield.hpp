#pragma once

#include "common.hpp"
#include "image.hpp"
#include "pfm.hpp"
#include "json_util.hpp"
#include "manifest.hpp"
#include "convolve.hpp"
#include "synthcam.hpp"
#include "geomcal.hpp"
#include "radcal.hpp"
#include "field.hpp"
#include "adam.hpp"
#include "checkpoint.hpp"
#include "trainer.hpp"
#include "metrics.hpp"
#include "baseline.hpp"
#include "grid.hpp"
#include "renderer.hpp"
#include "preprocess.hpp"
#include "recovery.hpp"
