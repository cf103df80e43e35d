"""Scenario files: JSON with a published schema, dotted-key overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from ..errors import ScenarioError

_POINT = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_RECT = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_POLYLINE = {"type": "array", "items": _POINT, "minItems": 2}
_SPEED = {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                    {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0},
                     "minItems": 2, "maxItems": 2}]}
_REGION = {
    "type": "object",
    "properties": {
        "rect": _RECT,
        "disc": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
    },
    "additionalProperties": False,
    "minProperties": 1,
    "maxProperties": 1,
}


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


ADVERSARY_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": ["passive_observer", "relay_pair", "internal_forger", "replayer",
                                     "jammer", "flooder", "colluder_group"]}},
    "allOf": [
        {"if": {"properties": {"kind": {"const": "passive_observer"}}},
         "then": _obj({"kind": {}, "id": {"type": "string"}, "coverage": {"type": "array", "items": _RECT}},
                      ["coverage"])},
        {"if": {"properties": {"kind": {"const": "relay_pair"}}},
         "then": _obj({"kind": {}, "id": {"type": "string"}, "a": _POINT, "b": _POINT,
                       "delay_ms": {"type": "number", "minimum": 0},
                       "range_m": {"type": "number", "exclusiveMinimum": 0},
                       "bidirectional": {"type": "boolean"}}, ["a", "b", "delay_ms"])},
        {"if": {"properties": {"kind": {"const": "internal_forger"}}},
         "then": _obj({"kind": {}, "id": {"type": "string"}, "route": _POLYLINE, "speed_mps": _SPEED,
                       "spawn_ms": {"type": "number", "minimum": 0},
                       "jump_m": {"type": "number", "minimum": 0}, "home": {"type": "string"}},
                      ["route"])},
        {"if": {"properties": {"kind": {"const": "replayer"}}},
         "then": _obj({"kind": {}, "id": {"type": "string"}, "position": _POINT,
                       "delay_ms": {"type": "number", "minimum": 0},
                       "range_m": {"type": "number", "exclusiveMinimum": 0},
                       "max_replays": {"type": "integer", "minimum": 0}}, ["position", "delay_ms"])},
        {"if": {"properties": {"kind": {"const": "jammer"}}},
         "then": _obj({"kind": {}, "id": {"type": "string"}, "region": _RECT,
                       "duty_cycle": {"type": "number", "minimum": 0, "maximum": 1},
                       "period_ms": {"type": "number", "exclusiveMinimum": 0},
                       "start_ms": {"type": "number", "minimum": 0},
                       "stop_ms": {"type": "number", "minimum": 0}}, ["region"])},
        {"if": {"properties": {"kind": {"const": "flooder"}}},
         "then": _obj({"kind": {}, "id": {"type": "string"}, "position": _POINT,
                       "rate_per_s": {"type": "number", "exclusiveMinimum": 0},
                       "start_ms": {"type": "number", "minimum": 0},
                       "stop_ms": {"type": "number", "minimum": 0},
                       "region": _REGION, "home": {"type": "string"}},
                      ["position", "rate_per_s", "region"])},
        {"if": {"properties": {"kind": {"const": "colluder_group"}}},
         "then": _obj({"kind": {}, "id": {"type": "string"}, "members": {"type": "integer", "minimum": 1},
                       "position": _POINT, "victim": {"type": "string"}, "home": {"type": "string"}},
                      ["members", "position", "victim"])},
    ],
}

SCENARIO_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "vanetsec scenario",
    "type": "object",
    "required": ["duration_ms"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "seed": {"type": "integer", "minimum": 0},
        "duration_ms": {"type": "number", "exclusiveMinimum": 0},
        "scheme": {"enum": ["ed25519", "hmac"]},
        "regions": {"type": "array", "minItems": 1, "items": _obj(
            {"ca_id": {"type": "string"}, "bounds": _RECT}, ["ca_id", "bounds"])},
        "cross_certify": {"type": "boolean"},
        "roads": {"type": "array", "items": _POLYLINE},
        "vehicles": {"type": "array", "items": _obj({
            "id_prefix": {"type": "string"},
            "count": {"type": "integer", "minimum": 0},
            "route": _POLYLINE,
            "road": {"type": "integer", "minimum": 0},
            "speed_mps": _SPEED,
            "spawn_ms": {"type": "number", "minimum": 0},
            "spawn_interval_ms": {"type": "number", "minimum": 0},
            "spacing_m": {"type": "number", "minimum": 0},
            "role": {"enum": ["private-vehicle", "public-vehicle", "special-vehicle"]},
            "home": {"type": "string"},
            "clock_offset_ms": {"type": "number"},
        })},
        "rsus": {"type": "array", "items": _obj({
            "id": {"type": "string"}, "position": _POINT, "role": {"enum": ["rsu", "rsu-internet"]},
            "home": {"type": "string"}}, ["position"])},
        "rsu_line": _obj({"from": _POINT, "to": _POINT, "spacing_m": {"type": "number", "exclusiveMinimum": 0},
                          "prefix": {"type": "string"}}, ["from", "to", "spacing_m"]),
        "node": _obj({
            "beacon_hz": {"type": "number", "minimum": 1, "maximum": 10},
            "fresh_ms": {"type": "number", "exclusiveMinimum": 0},
            "epsilon_m": {"type": "number", "minimum": 0},
            "range_m": {"type": "number", "exclusiveMinimum": 0},
            "v_max_mps": {"type": "number", "exclusiveMinimum": 0},
            "overlap_m": {"type": "number", "minimum": 0},
            "overlap_window_ms": {"type": "number", "minimum": 0},
            "staleness_factor": {"type": "number", "exclusiveMinimum": 0},
            "seen_cache_size": {"type": "integer", "minimum": 1},
            "rate_limit_per_s": {"type": "integer", "minimum": 1},
            "geocast_max_age_ms": {"type": "number", "exclusiveMinimum": 0},
            "mds_window_ms": {"type": "number", "exclusiveMinimum": 0},
            "refill_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            "set_size": {"type": "integer", "minimum": 1},
        }),
        "radio": _obj({
            "range_m": {"type": "number", "exclusiveMinimum": 0},
            "loss": {"type": "number", "minimum": 0, "maximum": 1},
            "clock_error_us": {"type": "number", "minimum": 0},
        }),
        "ca": _obj({
            "tau_ms": {"type": "integer", "minimum": 1},
            "eviction_threshold": {"type": "integer", "minimum": 1},
            "leave_quorum": {"type": "integer", "minimum": 1},
            "leave_period_ms": {"type": "number", "exclusiveMinimum": 0},
            "crl_push_latency_ms": {"type": "number", "minimum": 0},
            "refill_retry_ms": {"type": "number", "exclusiveMinimum": 0},
        }),
        "crl": _obj({
            "enabled": {"type": "boolean"},
            "size_bytes": {"type": "integer", "minimum": 0},
            "rate_bps": {"type": "number", "exclusiveMinimum": 0},
            "piece_bytes": {"type": "integer", "minimum": 2, "multipleOf": 2},
            "redundancy": {"type": "number", "minimum": 1},
            "offset_mode": {"enum": ["random", "synchronized"]},
            "start_ms": {"type": "number", "minimum": 0},
            "v2v": {"type": "boolean"},
            "v2v_period_ms": {"type": "number", "exclusiveMinimum": 0},
            "v2v_max_pieces": {"type": "integer", "minimum": 1},
            "compressed": {"type": "boolean"},
            "fp_rate": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "preload_revoked": {"type": "integer", "minimum": 0},
            "seed_vehicles": {"type": "integer", "minimum": 0},
        }),
        "adversaries": {"type": "array", "items": ADVERSARY_SCHEMA},
        "mix_zones": {"type": "array", "items": _obj({
            "zone_id": {"type": "string"}, "center": _POINT, "size_m": {"type": "number", "exclusiveMinimum": 0},
            "n_ports": {"type": "integer", "minimum": 1},
            "max_traverse_ms": {"type": "number", "exclusiveMinimum": 0},
            "kind": {"enum": ["unmonitored", "cryptographic"]},
            "leak_probability": {"type": "number", "minimum": 0},
            "boundary_m": {"type": "number", "minimum": 0},
        }, ["zone_id", "center", "size_m"])},
        "geocasts": {"type": "array", "items": _obj({
            "origin": {"type": "string"}, "at_ms": {"type": "number", "minimum": 0},
            "region": _REGION, "payload": {"type": "string"}}, ["origin", "at_ms", "region"])},
        "kills": {"type": "array", "items": _obj({
            "target": {"type": "string"}, "at_ms": {"type": "number", "minimum": 0},
            "ack_lost": {"type": "boolean"}, "timeout_ms": {"type": "number", "exclusiveMinimum": 0}},
            ["target", "at_ms"])},
        "trace": _obj({"beacon_rx": {"type": "boolean"}, "beacon_tx": {"type": "boolean"}}),
    },
}

DEFAULTS = {
    "name": "scenario",
    "seed": 0,
    "scheme": "hmac",
    "regions": [{"ca_id": "A", "bounds": [-1e9, -1e9, 1e9, 1e9]}],
    "cross_certify": True,
    "roads": [],
    "vehicles": [],
    "rsus": [],
    "node": {},
    "radio": {"range_m": 1000.0, "loss": 0.0, "clock_error_us": 0.0},
    "ca": {"tau_ms": 60_000, "eviction_threshold": 3, "leave_quorum": 3, "leave_period_ms": 1000.0,
           "crl_push_latency_ms": 1000.0, "refill_retry_ms": 1000.0},
    "crl": {"enabled": False, "size_bytes": 0, "rate_bps": 2000.0, "piece_bytes": 512, "redundancy": 1.5,
            "offset_mode": "random", "start_ms": 0.0, "v2v": False, "v2v_period_ms": 5000.0,
            "v2v_max_pieces": 8, "compressed": False, "fp_rate": 0.001, "preload_revoked": 0,
            "seed_vehicles": 0},
    "adversaries": [],
    "mix_zones": [],
    "geocasts": [],
    "kills": [],
    "trace": {"beacon_rx": False, "beacon_tx": True},
}


@dataclass
class Scenario:
    data: dict

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def duration_ms(self) -> float:
        return float(self.data["duration_ms"])

    @property
    def name(self) -> str:
        return self.data["name"]

    def __getitem__(self, key):
        return self.data[key]

    def get(self, key, default=None):
        return self.data.get(key, default)

    def with_seed(self, seed: int) -> "Scenario":
        d = copy.deepcopy(self.data)
        d["seed"] = seed
        return Scenario(d)


def validate(data) -> list[str]:
    """Schema problems as 'path: message' strings (empty when valid)."""
    validator = jsonschema.Draft202012Validator(SCENARIO_SCHEMA)
    problems = []
    for err in sorted(validator.iter_errors(data), key=lambda e: list(map(str, e.absolute_path))):
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        problems.append(f"{path}: {err.message}")
    return problems


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides) -> dict:
    """Apply ``key.sub=value`` assignments; list elements are addressed by index."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ScenarioError([f"--set {item!r}: expected key=value"])
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        target = data
        try:
            for p in parts[:-1]:
                if isinstance(target, list):
                    target = target[int(p)]
                else:
                    target = target.setdefault(p, {})
            last = parts[-1]
            if isinstance(target, list):
                target[int(last)] = _parse_value(value)
            else:
                target[last] = _parse_value(value)
        except (ValueError, IndexError, TypeError, AttributeError):
            raise ScenarioError([f"--set {item!r}: no such field"]) from None
    return data


def _merge_defaults(data: dict) -> dict:
    out = copy.deepcopy(DEFAULTS)
    for k, v in data.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = {**out[k], **v}
        else:
            out[k] = v
    return out


def build_scenario(data: dict, overrides=(), seed: int | None = None) -> Scenario:
    data = apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    problems = validate(data)
    if problems:
        raise ScenarioError(problems)
    return Scenario(_merge_defaults(data))


def load_scenario(path, overrides=(), seed: int | None = None) -> Scenario:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"line {exc.lineno} column {exc.colno}: {exc.msg}"]) from None
    return build_scenario(data, overrides, seed)
