"""Beam search against exhaustive search and greedy decoding on random tiny models."""
import argparse

from icl_ser.tinylm import audit_decoding


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--models", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beam", type=int, default=4)
    args = p.parse_args()
    audit = audit_decoding(args.models, args.seed, args.beam)
    print(f"beam{args.beam} == exhaustive argmax: {audit.beam_matches}/{audit.n_models}")
    print(f"beam1 == greedy: {audit.greedy_matches}/{audit.n_models}")
    for miss in audit.beam_misses:
        print("miss", miss)


if __name__ == "__main__":
    main()
