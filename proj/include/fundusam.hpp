#ifndef FUNDUSAM_HPP
#define FUNDUSAM_HPP

#include "fundusam/autograd.hpp"
#include "fundusam/cbam.hpp"
#include "fundusam/checkpoint.hpp"
#include "fundusam/config.hpp"
#include "fundusam/data.hpp"
#include "fundusam/decoder.hpp"
#include "fundusam/encoder.hpp"
#include "fundusam/error.hpp"
#include "fundusam/image_io.hpp"
#include "fundusam/losses.hpp"
#include "fundusam/metrics.hpp"
#include "fundusam/model.hpp"
#include "fundusam/optim.hpp"
#include "fundusam/parameters.hpp"
#include "fundusam/peft.hpp"
#include "fundusam/pipeline.hpp"
#include "fundusam/polar.hpp"
#include "fundusam/raster.hpp"
#include "fundusam/visualize.hpp"

#endif  // FUNDUSAM_HPP
