#pragma once

#include "lsk/checkpoint.hpp"
#include "lsk/commands.hpp"
#include "lsk/config.hpp"
#include "lsk/cws.hpp"
#include "lsk/metrics.hpp"
#include "lsk/network.hpp"
#include "lsk/parallel.hpp"
#include "lsk/report.hpp"
#include "lsk/scene_io.hpp"
#include "lsk/sds.hpp"
#include "lsk/sparse_conv.hpp"
#include "lsk/synth.hpp"
#include "lsk/tensor.hpp"
#include "lsk/train.hpp"
#include "lsk/voxel.hpp"
