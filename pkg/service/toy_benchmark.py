"""
End-to-end toy benchmark.
Trains the full pipeline on the synthetic dataset, compares it with an untrained
baseline, then runs the ablation rows whose ordering is checked.

Usage: python service/toy_benchmark.py [config.yaml] [output_dir]
"""
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from config.config import ExperimentConfig
from inverter.data import FaceDataset, load_manifest, select_split
from inverter.evaluation import evaluate_model
from inverter.generators import ChannelSchedule, LayeredInverter
from inverter.logger import RunLogger
from inverter.main import _plugins, build_detector, build_extractor, main as cli_main, resolve_device
from inverter.training import StagedTrainer, run_ablation, seed_everything

MIN_TYPE1_TAR = 0.8
MONOTONE_TOLERANCE = 0.05
FAR = 0.01


def stage1_monotone(history: list) -> bool:
    """Every layer generator's epoch loss stays within 5% of the previous epoch's."""
    epochs = [h["losses"] for h in history if h["stage"] == 1]
    for previous, current in zip(epochs, epochs[1:]):
        for name, terms in current.items():
            if terms["total"] > previous[name]["total"] * (1.0 + MONOTONE_TOLERANCE):
                return False
    return True


def run_benchmark(config_path: str, out_dir: Path) -> dict:
    """
    Run the benchmark and return its summary.

    Args:
        config_path: Toy experiment YAML
        out_dir: Directory for data, runs and the summary file

    Returns:
        Summary dict with a "passed" entry per criterion
    """
    started = time.time()
    config = ExperimentConfig.from_env(ExperimentConfig.from_yaml(config_path))
    data_dir = out_dir / "data"
    config = replace(config, manifest_path=str(data_dir / "manifest.jsonl"), output_dir=str(out_dir / "runs"))
    if not Path(config.manifest_path).exists():
        code = cli_main(["synth", "--config", config_path, "--out", str(data_dir)])
        if code != 0:
            raise RuntimeError(f"synth failed with exit code {code}")

    device = resolve_device(config.device)
    run_dir = Path(config.output_dir)
    logger = RunLogger(run_dir / "metrics.jsonl")
    records = load_manifest(config.manifest_path)
    extractor = build_extractor(config.target_extractor, config, records, run_dir, logger, device)
    fnet, classifier = _plugins(config, device)
    detector = build_detector(config)
    train = FaceDataset(select_split(records, "train"), extractor, config.resolution, detector)
    test = FaceDataset(select_split(records, "test"), extractor, config.resolution, detector)

    seed_everything(config.seed)
    schedule = ChannelSchedule.for_resolution(config.resolution, config.width_divisor)
    baseline_model = LayeredInverter(config.template_dim, config.resolution, schedule).to(device)
    baseline = evaluate_model(baseline_model, test, extractor, fnet, [FAR],
                              impostor_ratio=config.impostor_ratio, seed=config.seed)[0]

    trainer = StagedTrainer(config, extractor, fnet, classifier, logger, run_dir / "full", device)
    state = trainer.run(train)
    full = evaluate_model(state.model, test, extractor, fnet, config.far_levels,
                          impostor_ratio=config.impostor_ratio, seed=config.seed, logger=logger)[0]

    rows = {6: {"type2": full.tar("type2", FAR), "fapd": full.fapd}}
    for row in (5, 4, 1):
        metrics = run_ablation(config, row, train, test, extractor, fnet, classifier, logger, run_dir, device)
        rows[row] = {"type2": metrics[f"type2_tar@{FAR!r}"], "fapd": metrics["fapd"]}
    logger.close()

    type1 = full.tar("type1", FAR)
    summary = {
        "elapsed_seconds": time.time() - started,
        "type1_tar": type1,
        "baseline_type1_tar": baseline.tar("type1", FAR),
        "rows": rows,
        "passed": {
            "type1_tar_at_least_0.8": type1 >= MIN_TYPE1_TAR,
            "beats_untrained_baseline": type1 > baseline.tar("type1", FAR),
            "stage1_losses_non_increasing": stage1_monotone(state.history),
            "row6_ge_row5_ge_row4_type2": rows[6]["type2"] >= rows[5]["type2"] >= rows[4]["type2"],
            "row6_fapd_le_row1": rows[6]["fapd"] <= rows[1]["fapd"],
        },
    }
    with open(out_dir / "benchmark.json", "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    return summary


if __name__ == "__main__":
    config_path = sys.argv[1] if len(sys.argv) > 1 else "conf.yaml"
    out_dir = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("runs/benchmark")
    out_dir.mkdir(parents=True, exist_ok=True)

    summary = run_benchmark(config_path, out_dir)
    print(f"Type-I TAR@1%FAR: {summary['type1_tar']:.4f} (untrained: {summary['baseline_type1_tar']:.4f})")
    for row, values in sorted(summary["rows"].items()):
        print(f"  row {row}: Type-II TAR@1%FAR={values['type2']:.4f}  FAPD={values['fapd']:.4f}")
    for name, ok in summary["passed"].items():
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    print(f"Elapsed: {summary['elapsed_seconds'] / 60:.1f} min")
    sys.exit(0 if all(summary["passed"].values()) else 1)
