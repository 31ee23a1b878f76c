"""Refinement metric trajectories across denoising strengths.

Starts a session from a sketch of the wrong cluster and refines toward a
target description for several strength settings, recording the full
previous-iteration and reference metric series. One CSV per strength lands
in --out, plus per-metric PNG plots when matplotlib is importable.

Usage:
    python3 scripts/refinement_curves.py --out runs/refinement
    python3 scripts/refinement_curves.py --strengths 0.1,0.3,0.9 --iterations 10
"""

import argparse
import csv
from pathlib import Path

from sketchlab.dataset import descriptions, synth_fixture
from sketchlab.encoder import EncoderConfig, EncoderModel
from sketchlab.refine import RefinementConfig, ToyLatentBackend, run_session
from sketchlab.tokenizer import Tokenizer

METRICS = ("ssim", "psnr", "clip_score", "perceptual_distance")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--iterations", type=int, default=8)
    parser.add_argument("--strengths", default="0.2,0.5,0.8",
                        help="comma-separated denoising strengths, one session each")
    parser.add_argument("--model-kind", default="model2",
                        choices=["model1", "model2", "model3"])
    parser.add_argument("--guidance", type=float, default=7.5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--fixture-seed", type=int, default=3)
    parser.add_argument("--out", default="runs/refinement")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    strengths = [float(s) for s in args.strengths.split(",") if s.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pairs = synth_fixture(3, 4, seed=args.fixture_seed)
    tokenizer = Tokenizer.fit(descriptions(pairs))
    model = EncoderModel(EncoderConfig(), tokenizer, seed=0)
    backend = ToyLatentBackend(image_size=model.config.image_size,
                               conditioning_dim=model.config.cond_dim, seed=1)

    # Target the first cluster's description but start from a sketch drawn
    # from a different cluster, so the reference series has room to move.
    target = pairs[0]
    start = next(p for p in pairs if p.cluster != target.cluster)

    series_by_strength = {}
    for strength in strengths:
        cfg = RefinementConfig(model_kind=args.model_kind, strength=strength,
                               guidance_scale=args.guidance,
                               iterations=args.iterations, seed=args.seed)
        session = run_session(target.description, start.image, cfg, backend,
                              model, reference=target.image)
        rows = {
            "iteration": list(range(1, args.iterations + 1)),
        }
        for key in METRICS:
            rows[f"{key}_prev"] = session.metric_series(key)
            rows[f"{key}_ref"] = session.metric_series(key, reference=True)
        series_by_strength[strength] = rows

        path = out / f"strength_{strength:g}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(rows.keys())
            writer.writerows(zip(*rows.values()))
        print(f"strength {strength:g}: wrote {path}")

    if plt is None:
        print("matplotlib not installed; skipping plots")
        return 0

    for key in METRICS:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        for strength, rows in series_by_strength.items():
            ax.plot(rows["iteration"], rows[f"{key}_ref"], marker="o",
                    label=f"strength {strength:g}")
        ax.set_xlabel("iteration")
        ax.set_ylabel(f"{key} vs reference")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(out / f"{key}.png", dpi=120)
        plt.close(fig)
    print(f"wrote {len(METRICS)} plots to {out}/")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
