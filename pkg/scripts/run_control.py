"""Compare a fixed k=7 TO+LD meta-trained control with the main model at 1-shot TU+LD."""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from icl_ser.corpus import load_corpus
from icl_ser.evaluation import evaluate_cell
from icl_ser.model import load_checkpoint, save_checkpoint
from icl_ser.pipeline import load_config
from icl_ser.selection import SelectionSetting
from icl_ser.training import load_speech_lm, meta_train


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", type=Path, default=Path(__file__).resolve().parents[1] / "configs" / "default.toml")
    p.add_argument("--workdir", type=Path, default=Path("runs/default"), help="a finished run_pipeline.py workdir")
    p.add_argument("-k", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    corpus = load_corpus(args.workdir / "data")
    control_cfg = replace(cfg.metaicl, episode_ks=(7,), episode_setting="TO+LD")
    control = meta_train(corpus, control_cfg, load_checkpoint(args.workdir / "stage1.ckpt"))
    save_checkpoint(args.workdir / "control.ckpt", control)
    setting = SelectionSetting.parse("TU+LD")
    for name, ckpt in (("main", load_checkpoint(args.workdir / "metaicl.ckpt")), ("control", control)):
        row = evaluate_cell(load_speech_lm(ckpt), corpus.test, args.k, setting, cfg.eval.seed).row
        print(f"{name}: {args.k}-shot TU+LD ua_spk {row.ua_spk:.4f}")


if __name__ == "__main__":
    main()
