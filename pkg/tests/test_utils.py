#  Licensed under the Apache License, Version 2.0 (the "License"); you may
#  not use this file except in compliance with the License.
#  You may obtain a copy of the License at
#
# 	http://www.apache.org/licenses/LICENSE-2.0
#
#  Unless required by applicable law or agreed to in writing,
#  software distributed under the License is distributed on an
#  "AS IS" BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
#  KIND, either express or implied.  See the License for the
#  specific language governing permissions and limitations
#  under the License.

import numpy as np

import layer_delta
from layer_delta import config_utils
from layer_delta._utils import parameter_digest


def test_parameter_digest_is_stable():
    arrays = [np.arange(6.0).reshape(2, 3), np.ones(4, dtype=np.int8)]
    assert parameter_digest(arrays) == parameter_digest([a.copy() for a in arrays])
    assert len(parameter_digest(arrays)) == 64


def test_parameter_digest_sees_values_shapes_and_dtypes():
    a = np.arange(6.0)
    digest = parameter_digest([a])

    changed = a.copy()
    changed[5] = np.nextafter(changed[5], np.inf)
    assert parameter_digest([changed]) != digest
    assert parameter_digest([a.reshape(2, 3)]) != digest
    assert parameter_digest([a.astype(np.float32)]) != digest
    # Non-contiguous views hash like their contents
    assert parameter_digest([np.arange(12.0)[::2]]) == parameter_digest(
        [np.arange(0.0, 12.0, 2.0)]
    )


def test_exported_objects_report_package_module():
    assert layer_delta.Tensor.__module__ == "layer_delta"
    assert layer_delta.SharingPlan.__module__ == "layer_delta"
    assert layer_delta.compress.__module__ == "layer_delta"
    assert config_utils.merge_config.__module__ == "layer_delta.config_utils"
