#pragma once

#include "occface/constants.hpp"
#include "occface/error.hpp"
#include "occface/image.hpp"
#include "occface/rng.hpp"
#include "occface/morphable_model.hpp"
#include "occface/basis_io.hpp"
#include "occface/camera_light.hpp"
#include "occface/param_vector.hpp"
#include "occface/renderer.hpp"
#include "occface/occlusion.hpp"
#include "occface/fitting.hpp"
#include "occface/image_io.hpp"
#include "occface/mesh_io.hpp"
#include "occface/fixtures.hpp"
#include "occface/pipeline.hpp"
