"""Assemble the B and L variants; count parameters and MACs against the
published budgets (2.54M/3.53M params, 13.62G/16.42G MACs at 3x512x1024).

Run:  python demos/03_network_counts.py
"""

import numpy as np

from dwrseg import network as N

print("=== 1. structure of the two variants ===")
for variant in ("B", "L"):
    cfg = N.preset(variant)
    rows = ", ".join(f"{name}:{s.kind}x{s.repeats}@{s.channels}"
                     for name, s in zip(cfg.stage_names, cfg.stages))
    print(f"{variant}: stem {cfg.stem_channels} | {rows} | "
          f"decoder {cfg.decoder_width} -> head {cfg.head_width}")
print()

print("=== 2. parameter counts vs reference ===")
for variant in ("B", "L"):
    cfg = N.preset(variant)
    total, items = N.count_params(cfg)
    target = N.PARAM_TARGETS[variant]
    print(f"{variant}: {total:,} params "
          f"(reference {target / 1e6:.2f}M, {100 * (total - target) / target:+.1f}%)")
    for group, count in N.breakdown_by_group(items).items():
        print(f"    {group:<8s} {count:>12,d}")
print()

print("=== 3. MAC counts at 3x512x1024 vs reference ===")
for variant in ("B", "L"):
    total, items = N.count_macs(N.preset(variant), 512, 1024)
    target = N.MAC_TARGETS[variant]
    print(f"{variant}: {total / 1e9:.2f}G MACs "
          f"(reference {target / 1e9:.2f}G, {100 * (total - target) / target:+.1f}%)")
    groups = N.breakdown_by_group(items)
    dominant = max(groups, key=groups.get)
    print(f"    dominant group: {dominant} with {groups[dominant] / 1e9:.2f}G")
print()

print("=== 4. a forward pass and its stage taps ===")
cfg = N.preset("B", num_classes=19)
params = N.build(cfg, rng_seed=0)
x = np.random.default_rng(0).random((1, 3, 64, 64), dtype=np.float32)
logits, taps = N.infer(params, cfg, x)
print("input", x.shape, "-> logits", logits.shape)
for name, tap in taps.items():
    print(f"    {name}: {tap.shape} (1/{64 // tap.shape[2]} resolution)")

print("\n=== 5. checkpoints round-trip byte-identically ===")
import tempfile
from pathlib import Path

with tempfile.TemporaryDirectory() as tmp:
    p1, p2 = Path(tmp) / "a.dwck", Path(tmp) / "b.dwck"
    N.save_checkpoint(params, cfg, p1)
    loaded, cfg2 = N.load_checkpoint(p1)
    N.save_checkpoint(loaded, cfg2, p2)
    print("save -> load -> save identical:", p1.read_bytes() == p2.read_bytes())
    print(f"checkpoint size: {p1.stat().st_size / 1e6:.1f} MB")
