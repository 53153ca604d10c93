"""Canonical JSON serialization and config fingerprints.

Fingerprints gate checkpoint/manifest compatibility, so the byte form must be
stable: sorted keys, no whitespace variance, floats via repr round-trip.
"""

from __future__ import annotations

import hashlib
import json


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("ascii")).hexdigest()
