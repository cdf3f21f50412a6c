"""Per-regime norm attainment on IC1 train seeds, one row per regime."""

from __future__ import annotations

from icr.config import ExperimentConfig
from icr.norms import NORM_IDS
from icr.simulator import compute_outcomes, run_episode


def main() -> None:
    cfg = ExperimentConfig()
    ic = cfg.ics["IC1"]
    seeds = cfg.seeds["IC1"].train
    print(f"{'regime':6s} " + " ".join(f"{n:>6s}" for n in NORM_IDS) + f"   (attained on k of {len(seeds)} seeds)")
    for rid, regime in cfg.regimes.items():
        hits = dict.fromkeys(NORM_IDS, 0)
        for s in seeds:
            out = compute_outcomes(run_episode(ic, regime, s, params=cfg.sim), cfg.catalog, cfg.sim.attain_q)
            for n in NORM_IDS:
                hits[n] += out[n].all_attained()
        print(f"{rid:6s} " + " ".join(f"{hits[n]:6d}" for n in NORM_IDS))


if __name__ == "__main__":
    main()
