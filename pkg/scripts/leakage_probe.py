"""How much transmitter location the fingerprint carries at a fixed model.

Collects clean traces from one model (freshly initialized, or after training
``--rounds`` rounds of the undefended scheme) and compares the evaluation
attacker with the centroid predictor.

    python scripts/leakage_probe.py --traces 600
"""

import argparse

import numpy as np

from fedshade import attack, radionet
from fedshade.config import ExperimentConfig
from fedshade.rng import stream
from fedshade.synthdata import generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--traces", type=int, default=600)
    ap.add_argument("--phase", default="stage1", choices=radionet.PHASES)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = ExperimentConfig()
    spec = cfg.data.spec
    n_maps = max(2, args.traces // cfg.data.tx_per_map)
    data = generate_dataset(stream(args.seed, "probe-data"), spec, n_maps, cfg.data.tx_per_map)
    params = radionet.init_params(stream(args.seed, "init"), cfg.model)
    masks = radionet.build_group_masks(cfg.model)
    traces = [
        attack.collect_trace(params, data[i], args.phase, cfg.attack.steps, cfg.fed.lr)
        for i in range(min(args.traces, len(data)))
    ]
    for t, m in zip(traces, data.map_id):
        t.map_id = int(m)
    coords = np.stack([t.coord_m for t in traces])
    rmse = attack.eval_attacker(traces, masks, cfg.attack, stream(args.seed, "attacker"), max(spec.extent_m))
    print(f"traces {len(traces)}  attacker RMSE {rmse:.2f} m  centroid RMSE {attack.centroid_rmse(coords):.2f} m")


if __name__ == "__main__":
    main()
