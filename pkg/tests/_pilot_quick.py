"""Quick pilot: short runs to sanity-check the attack/defense orderings
before committing to the full acceptance-length training. Not a test."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import helpers
from cyclelab.metrics import (load_translators, reconstruction_honesty,
                              sensitivity_to_noise)
from cyclelab.scenes import load_manifest, load_split


def main(cache, iters):
    cache = Path(cache)
    ds = helpers.ensure_dataset(cache, "many-to-one")
    manifest = load_manifest(ds, check_files=False)
    test_a = load_split(ds, "testA", manifest)
    for defense in ("none", "noise", "guess"):
        cfg = helpers.run_config(defense, seed=0, iters=iters)
        run = helpers.ensure_run(cache, ds, cfg)
        g_ab, g_ba, _ = load_translators(run)
        sn = sensitivity_to_noise(g_ba, g_ab, test_a, n=25, seed=0)
        rh = reconstruction_honesty(g_ba, g_ab, test_a, manifest.palette, n=25)
        print(f"{defense:6s} SN AuC={sn.auc:.6f}  RH={rh.mean:.4f}+-{rh.std:.4f}",
              flush=True)


if __name__ == "__main__":
    main(sys.argv[1], int(sys.argv[2]))
