import sys
from pathlib import Path

from click.testing import CliRunner

sys.path.insert(0, str(Path(__file__).parent.parent))

from src.morphdiff.checkpoint import load_bae_file
from src.morphdiff.config import load_run_config
from src.morphdiff.evaluation import evaluate_split
from src.morphdiff.main import CompletionSystem, configure_logging
from src.morphdiff.synthdata import LongitudinalDataset, make_dataset
from src.morphdiff.training import Trainer
from src.morphdiff.cli import cli

WORK_DIR = Path("runs/desk_benchmark")
SUBJECTS = 200
EPOCHS = 50
STEPS = 100


def main():
    configure_logging()
    data_dir = WORK_DIR / "data"
    run_dir = WORK_DIR / "diffcom"
    bae_path = WORK_DIR / "bae.dfck"

    print("Generating dataset...")
    print("=" * 60)
    if not (data_dir / "train.txt").is_file():
        make_dataset(SUBJECTS, seed=0, out_dir=data_dir)

    config_path = WORK_DIR / "benchmark.conf"
    config_path.write_text(
        f"dataset_dir = {data_dir}\n"
        f"checkpoint_path = {run_dir}\n"
        f"bae_checkpoint = {bae_path}\n"
        f"T = {STEPS}\n"
        f"epochs = {EPOCHS}\n"
    )

    print("Training age critic...")
    if not bae_path.is_file():
        result = CliRunner().invoke(cli, ["train-bae", "--config", str(config_path)])
        if result.exit_code != 0:
            print(result.output)
            sys.exit(result.exit_code)

    print("Training diffusion network...")
    config = load_run_config(config_path)
    dataset = LongitudinalDataset(config.dataset_dir, config.u_max, config.age_min, config.age_max)
    Trainer(config, dataset, load_bae_file(bae_path)).fit()

    print("Evaluating...")
    with CompletionSystem(run_dir / "last.dfck") as system:
        report = evaluate_split(
            dataset, "test", lambda task, s: system.complete_task(task, s).field, num_aux=config.max_aux
        )
    report.write(WORK_DIR / "report")
    oracle = evaluate_split(dataset, "test", None)

    psnr, baseline = report.aggregate["psnr_db"][0], report.aggregate["baseline_psnr_db"][0]
    ssim, baseline_ssim = report.aggregate["ssim"][0], report.aggregate["baseline_ssim"][0]
    print(f"PSNR {psnr:.2f} dB vs identity {baseline:.2f} dB (uplift {psnr - baseline:+.2f} dB)")
    print(f"SSIM {ssim:.4f} vs identity {baseline_ssim:.4f}")
    print(f"folding fraction {report.aggregate['folding_fraction'][0]:.4%}")
    print(f"segmentation agreement {report.aggregate['seg_agreement'][0]:.2%} (ground truth {oracle.aggregate['seg_agreement'][0]:.2%})")

    passed = psnr - baseline >= 1.0 and ssim > baseline_ssim and report.aggregate["folding_fraction"][0] < 0.01
    print("\nBenchmark " + ("passed" if passed else "FAILED"))
    sys.exit(0 if passed else 1)


if __name__ == "__main__":
    main()
