/* Copyright 2026 The pfcv Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#ifndef PFCV_PFCV_HPP_
#define PFCV_PFCV_HPP_

#include "pfcv/core.hpp"
#include "pfcv/geometry.hpp"
#include "pfcv/fields.hpp"
#include "pfcv/layers.hpp"
#include "pfcv/baselines.hpp"
#include "pfcv/config.hpp"
#include "pfcv/model.hpp"
#include "pfcv/train.hpp"
#include "pfcv/io.hpp"
#include "pfcv/dataset.hpp"
#include "pfcv/viz.hpp"
#include "pfcv/gradcheck.hpp"

#endif  // PFCV_PFCV_HPP_
