"""Regenerate the shared codec test vectors consumed by the frontend tests.

Run from the repo root after any transport-encoding change:
    python3 frontend/tools/gen_vectors.py
"""
import json
import base64
from pathlib import Path

import numpy as np

from causvid import protocol

rng = np.random.default_rng(20240817)
vectors = []
for i, (k, h, w) in enumerate([(1, 4, 4), (2, 8, 8), (4, 16, 16), (3, 5, 7)]):
    frames = (rng.random((k, h, w, 1), dtype=np.float32) * 2 - 1).astype(np.float32)
    payload = protocol.encode_frames(frames)
    expected = list(base64.b64decode(payload))
    vectors.append({
        "chunk_frames": k, "height": h, "width": w,
        "payload": payload, "expected_bytes": expected,
    })

# edge cases: exact quantization anchors
anchor = np.array([-1.0, -0.5, 0.0, 0.5, 1.0], dtype=np.float32).reshape(1, 1, 5, 1)
vectors.append({
    "chunk_frames": 1, "height": 1, "width": 5,
    "payload": protocol.encode_frames(anchor),
    "expected_bytes": list(base64.b64decode(protocol.encode_frames(anchor))),
})

out = Path(__file__).resolve().parent.parent / "test-vectors" / "frames.json"
out.write_text(json.dumps(vectors, indent=1) + "\n")
print(f"wrote {out} ({len(vectors)} vectors)")
