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

import dataclasses
import os
from typing import Any, Dict, Mapping, Optional, Tuple, TypeVar, Union

from ._delta import RankSpec, SharingPlan
from ._exceptions import ConfigError, PlanError, SerializationError
from ._models import DEFAULT, DefaultType, ModelConfig, normalize_sublayers
from ._redundancy import ImportanceReport, build_plan
from ._serializer import JsonSerializer
from ._utils import fixup_module_metadata

__all__ = [
    "DEFAULT",
    "DefaultType",
    "PLAN_FIELDS",
    "load_json_config",
    "merge_config",
    "parse_plan_config",
    "parse_rank",
    "resolve_default",
]

T = TypeVar("T")

#: Fields accepted in a plan config file
PLAN_FIELDS = ("entries", "k", "protected_blocks", "rank", "rank_map", "strategy", "sublayer")


def resolve_default(val: Union[DefaultType, T], default: T) -> T:
    """Resolves a value that could be the ``DEFAULT`` sentinel
    into either the given value or the default value.
    """
    return val if val is not DEFAULT else default


def load_json_config(path: Union[str, "os.PathLike[str]"]) -> Dict[str, Any]:
    """Reads a JSON object from a file."""
    try:
        with open(path, "rb") as f:
            data = JsonSerializer().loads(f.read())
    except OSError as e:
        raise ConfigError(f"Couldn't read config file '{path}': {e.strerror}", errors=(e,)) from None
    except SerializationError as e:
        raise ConfigError(f"Config file '{path}' isn't valid JSON", errors=(e,)) from None
    if not isinstance(data, dict):
        raise ConfigError(f"Config file '{path}' must hold a JSON object")
    return data


def merge_config(base: T, *layers: Optional[Mapping[str, Any]]) -> T:
    """Applies each layer of overrides on top of a config dataclass, later
    layers winning. Values that are ``DEFAULT`` are skipped, so argparse
    flags that weren't given fall through to the config file and then to
    the dataclass defaults.
    """
    known = {f.name for f in dataclasses.fields(base)}  # type: ignore[arg-type]
    overrides: Dict[str, Any] = {}
    for layer in layers:
        for key, value in (layer or {}).items():
            if key not in known:
                raise ConfigError(f"Unknown field for {type(base).__name__}: '{key}'")
            if value is not DEFAULT:
                overrides[key] = value
    if not overrides:
        return base
    try:
        return dataclasses.replace(base, **overrides)  # type: ignore[type-var]
    except TypeError as e:
        raise ConfigError(f"Invalid {type(base).__name__}: {e}", errors=(e,)) from None


def parse_rank(value: Any, field: str = "rank") -> Union[int, str]:
    """An integer rank of at least 1 or ``"full"``."""
    if value == "full":
        return "full"
    if isinstance(value, str) and value.isdigit():
        value = int(value)
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"'{field}' must be a positive integer or 'full'")
    return value


def parse_plan_config(
    data: Mapping[str, Any],
    config: ModelConfig,
    importance: Optional[ImportanceReport] = None,
) -> Tuple[SharingPlan, Optional[RankSpec]]:
    """Turns a plan config object into a validated plan and its ranks.

    The object has the fields ``strategy``, ``sublayer``, ``k``,
    ``rank`` or ``rank_map``, ``protected_blocks`` and, for the
    'explicit' strategy, ``entries``. The rank is ``None`` when the file
    doesn't set one.
    """
    if not isinstance(data, Mapping):
        raise ConfigError("Plan config must be a JSON object")
    for key in data:
        if key not in PLAN_FIELDS:
            raise ConfigError(f"Unknown field in plan config: '{key}'")

    strategy = data.get("strategy", "sequential")
    if not isinstance(strategy, str):
        raise ConfigError("'strategy' must be a string")
    sublayer = data.get("sublayer", "mlp")
    if not isinstance(sublayer, str):
        raise ConfigError("'sublayer' must be a string")
    normalize_sublayers(sublayer)
    k = data.get("k", 0)
    if not isinstance(k, int) or isinstance(k, bool) or k < 0:
        raise ConfigError("'k' must be a non-negative integer")
    protected = data.get("protected_blocks")
    if protected is not None and (
        not isinstance(protected, list)
        or not all(isinstance(b, int) and not isinstance(b, bool) for b in protected)
    ):
        raise ConfigError("'protected_blocks' must be a list of integers")

    rank: Optional[RankSpec] = None
    if "rank" in data and "rank_map" in data:
        raise ConfigError("Only one of 'rank' and 'rank_map' can be set")
    if "rank" in data:
        rank = parse_rank(data["rank"])
    elif "rank_map" in data:
        rank_map = data["rank_map"]
        if not isinstance(rank_map, dict):
            raise ConfigError("'rank_map' must map site names to ranks")
        rank = {str(site): parse_rank(r, "rank_map") for site, r in rank_map.items()}

    try:
        if strategy == "explicit":
            entries = data.get("entries")
            if not isinstance(entries, list):
                raise ConfigError("'entries' must be a list of {target, anchor} objects")
            plan = SharingPlan.from_dict(
                {
                    "strategy": "explicit",
                    "entries": entries,
                    "protected_blocks": protected or [],
                }
            )
            plan.validate(config)
        else:
            if "entries" in data:
                raise ConfigError("'entries' is only allowed with the 'explicit' strategy")
            plan = build_plan(
                config,
                strategy,
                sublayer,
                k,
                importance=importance,
                protected_blocks=protected,
            )
    except PlanError as e:
        raise ConfigError(f"Invalid plan config: {e}", errors=(e,)) from None
    return plan, rank


# Ensure that all exported objects in this module
# are listed as being from this module
fixup_module_metadata(__name__, globals())
del fixup_module_metadata
