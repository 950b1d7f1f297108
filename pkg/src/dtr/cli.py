"""Command-line entry point: ``dtr {train,eval,update-tree,diagnose,synth}``.

File formats
  interaction log  user_id<TAB>item_id<TAB>timestamp (optional ``user_id`` header)
  eta table        user_key<TAB>item_id<TAB>probability (missing pairs are 0)
  eta users        user_id<TAB>user_key (maps log users to eta keys)
  tree             ``TREE v1 B H NLEAF`` header, then ``LEAF <i> <item>`` lines
  params           binary ``DTRPARAMS v1`` tensor checkpoint
  reports          TSV on stdout or under ``--out``
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from .data import HISTORY_LEN, DataFormatError, ingest, split_users, synth_generate, write_log
from .eta import FileEta, write_eta_table
from .metrics import evaluate_users
from .samplers import diagnose, layer_probability_vectors, layer_softmax, proportional_scores
from .scorer import CheckpointError, DINScorer, TableScorer, load_params, save_params
from .trainer import TrainConfig, TrainingDiverged, alternate
from .tree import TreeFormatError, TreeIndex
from .tree_update import check_bijection, update_tree

log = logging.getLogger("dtr")

TRAIN_DEFAULTS = {
    "data": None, "tree": None, "scorer": "din", "sampler": "tree", "rectify": "on",
    "negatives": 70, "alternations": 12, "epochs": 1, "seed": 0, "out": None,
    "lr": 1e-3, "batch_size": 100, "beam": 150, "embed_dim": 24, "stride": 7,
    "branching": 2, "windows": None, "eta": None, "eta_users": None, "k": "20",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> _Parser:
    p = _Parser(prog="dtr", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="alternate scorer training and tree updates")
    t.add_argument("--config", help="key=value lines mirroring the flags below; flags win")
    t.add_argument("--data", help="interaction log TSV (required)")
    t.add_argument("--tree", help="initial tree file (default: random tree over the items)")
    t.add_argument("--scorer", choices=["din", "dot"], help="preference model (default din)")
    t.add_argument("--sampler", choices=["uniform", "tree", "full"], help="negative sampler (default tree)")
    t.add_argument("--rectify", choices=["on", "off"], help="rectified labels (default on)")
    t.add_argument("--negatives", type=int, help="negatives per layer M (default 70)")
    t.add_argument("--alternations", type=int, help="train/update rounds (default 12)")
    t.add_argument("--epochs", type=int, help="epochs per alternation (default 1)")
    t.add_argument("--seed", type=int, help="seed for every random choice (default 0)")
    t.add_argument("--out", help="output directory (required)")
    t.add_argument("--lr", type=float, help="Adam learning rate (default 1e-3)")
    t.add_argument("--batch-size", type=int, help="mini-batch size (default 100)")
    t.add_argument("--beam", type=int, help="beam size for evaluation (default 150)")
    t.add_argument("--embed-dim", type=int, help="embedding size (default 24)")
    t.add_argument("--stride", type=int, help="tree update stride d (default 7)")
    t.add_argument("--branching", type=int, help="tree branching factor for a new tree (default 2)")
    t.add_argument("--windows", help="DIN window sizes, comma separated (default 20,20,10,10,2,2,2,1,1,1)")
    t.add_argument("--eta", help="eta table TSV for rectification (default: empirical estimate)")
    t.add_argument("--eta-users", help="user_id -> eta key TSV")
    t.add_argument("--k", help="evaluation cut-offs, comma separated (default 20)")

    e = sub.add_parser("eval", help="precision/recall/F of beam retrieval on held-out users")
    e.add_argument("--data", required=True)
    e.add_argument("--tree", required=True)
    e.add_argument("--params", required=True)
    e.add_argument("--seed", type=int, default=0, help="split seed used at training time")
    e.add_argument("--split", choices=["test", "validation"], default="test")
    e.add_argument("--beam", type=int, default=150)
    e.add_argument("--k", type=_ints, default=[20])
    e.add_argument("--exhaustive", action="store_true", help="score every leaf instead of beam search")
    e.add_argument("--out", help="report file (default stdout)")
    e.add_argument("--lists", help="also write per-user ranked items: user_id<TAB>item,item,...")

    u = sub.add_parser("update-tree", help="re-learn the item-to-leaf mapping with a fixed scorer")
    u.add_argument("--data", required=True)
    u.add_argument("--tree", required=True)
    u.add_argument("--params", required=True)
    u.add_argument("--seed", type=int, default=0)
    u.add_argument("--stride", type=int, default=7)
    u.add_argument("--out", required=True, help="new tree file")

    d = sub.add_parser("diagnose", help="per-layer tree-sampling diagnostics")
    d.add_argument("--tree", required=True)
    d.add_argument("--params", required=True)
    d.add_argument("--check", choices=["prop4", "prop-construction", "all"], default="all",
                   help="prop4: per-layer sum of q; prop-construction: q vs softmax under "
                        "proportional scores; all: sum q, KL and max |q - p| per layer")
    d.add_argument("--history", type=_ints, default=[], help="comma separated item ids, oldest first")
    d.add_argument("--out")

    s = sub.add_parser("synth", help="synthetic log with a known eta table")
    s.add_argument("--items", type=int, required=True)
    s.add_argument("--users", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--concentration", type=float, default=0.1)
    s.add_argument("--clusters", type=int, default=10)
    s.add_argument("--out", default=".", help="directory for log.tsv, eta.tsv and users.tsv")
    p.train_parser = t  # config files go through the same type checks as flags
    return p


# -- helpers -------------------------------------------------------------------

def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def read_config(path) -> list[str]:
    """``key=value`` lines (``#`` comments allowed) as flag tokens."""
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (x.strip() for x in line.split("=", 1))
            tokens += ["--" + key.replace("_", "-"), value]
    return tokens


def resolve_train(args, parser: _Parser) -> dict:
    explicit = {k: v for k, v in vars(args).items() if k in TRAIN_DEFAULTS and v is not None}
    from_file = {}
    if args.config:
        cfg = parser.parse_args(read_config(args.config))
        from_file = {k: v for k, v in vars(cfg).items() if k in TRAIN_DEFAULTS and v is not None}
    resolved = {**TRAIN_DEFAULTS, **from_file, **explicit}
    for key in ("data", "out"):
        if resolved[key] is None:
            parser.error(f"the following arguments are required: --{key}")
    return resolved


def _history_len(scorer) -> int:
    return scorer.history_length if isinstance(scorer, DINScorer) else HISTORY_LEN


def _load_eta(path, users_path, log_data):
    dense = {int(raw): i + 1 for i, raw in enumerate(log_data.item_ids)}
    user_key = None
    if users_path:
        user_key = {}
        with open(users_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataFormatError(f"{users_path}:{lineno}: expected user_id<TAB>user_key")
                user_key[int(parts[0])] = parts[1]
    return FileEta(path, log_data.n_items, user_key, dense)


# -- subcommands -------------------------------------------------------------------

def cmd_train(args, parser) -> int:
    r = resolve_train(args, parser.train_parser)
    for key in sorted(r):
        log.info("config %s=%s", key, r[key])
    windows = tuple(_ints(r["windows"])) if r["windows"] else None
    config = TrainConfig(
        negatives=r["negatives"], sampler=r["sampler"], rectify=r["rectify"] == "on",
        learning_rate=r["lr"], batch_size=r["batch_size"], epochs=r["epochs"],
        alternations=r["alternations"], seed=r["seed"], scorer=r["scorer"], beam_size=r["beam"],
        embed_dim=r["embed_dim"], update_stride=r["stride"], branching=r["branching"],
        eval_k=tuple(_ints(str(r["k"]))),
        **({"window_sizes": windows} if windows else {}),
    )
    data = ingest(r["data"])
    hist_len = sum(config.window_sizes) if config.scorer == "din" else HISTORY_LEN
    split = split_users(data, r["seed"], hist_len)
    if r["tree"]:
        tree = TreeIndex.load(r["tree"])
    else:
        tree = TreeIndex.random(np.arange(1, data.n_items + 1), config.branching, seed=r["seed"])
    if sorted(tree.leaf_items.tolist()) != list(range(1, data.n_items + 1)):
        raise ValueError("tree items do not match the items of the log")
    eta = _load_eta(r["eta"], r["eta_users"], data) if r["eta"] else None
    os.makedirs(r["out"], exist_ok=True)
    with open(os.path.join(r["out"], "config.txt"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}={r[k]}\n" for k in sorted(r))
    res = alternate(config, tree, split.train, eta=eta, eval_users=split.validation,
                    train_sequences=split.train_sequences, n_items=data.n_items)
    res.tree.save(os.path.join(r["out"], "tree.txt"))
    save_params(res.scorer, os.path.join(r["out"], "params.bin"))
    with open(os.path.join(r["out"], "items.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{i + 1}\t{raw}\n" for i, raw in enumerate(data.item_ids))
    lines = ["alternation\tK\tprecision\trecall\tf_measure\tn_users"]
    for a, rep in enumerate(res.metrics):
        lines += [f"{a}\t{row}" for row in rep.to_tsv().splitlines()[1:]]
    with open(os.path.join(r["out"], "metrics.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(r["out"], "losses.tsv"), "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n" + "".join(f"{i + 1}\t{x:.10g}\n" for i, x in enumerate(res.losses)))
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def _load_model(args):
    tree = TreeIndex.load(args.tree)
    scorer = load_params(args.params)
    n_nodes = scorer.params["node_emb" if "node_emb" in scorer.params else "node_score"].shape[0]
    if n_nodes != tree.n_nodes:
        raise ValueError(f"checkpoint has {n_nodes} nodes but the tree has {tree.n_nodes}")
    return tree, scorer


def cmd_eval(args, parser) -> int:
    tree, scorer = _load_model(args)
    data = ingest(args.data)
    split = split_users(data, args.seed, _history_len(scorer))
    users = split.test if args.split == "test" else split.validation
    lists = {}
    rep = evaluate_users(tree, scorer, users, args.beam, tuple(args.k), args.exhaustive, lists)
    _emit(rep.to_tsv(), args.out)
    if args.lists:
        with open(args.lists, "w", encoding="utf-8") as fh:
            # raw item ids, as in the input log
            fh.writelines(f"{u}\t{','.join(str(int(data.item_ids[i - 1])) for i in items)}\n"
                          for u, items in sorted(lists.items()))
    if rep.n_skipped:
        log.info("%d users without labels skipped", rep.n_skipped)
    return 0


def cmd_update_tree(args, parser) -> int:
    tree, scorer = _load_model(args)
    split = split_users(ingest(args.data), args.seed, _history_len(scorer))
    new = update_tree(tree, scorer, split.train, args.stride)
    check_bijection(tree, new)
    new.save(args.out)
    return 0


def cmd_diagnose(args, parser) -> int:
    tree, scorer = _load_model(args)
    hist = np.zeros(_history_len(scorer), dtype=np.int64)
    h = np.asarray(args.history[-hist.size:], dtype=np.int64)
    if h.size:
        hist[-h.size:] = h
    rows = []
    if args.check == "prop4":
        qs = layer_probability_vectors(tree, scorer, hist)
        rows.append("layer\tn_nodes\tsum_q\tabs_err")
        for j in range(1, tree.height + 1):
            s = float(qs[j].sum())
            rows.append(f"{j}\t{tree.level_sizes[j]}\t{s:.17g}\t{abs(s - 1):.3g}")
    elif args.check == "prop-construction":
        leaf = scorer.score(hist, tree.gid(tree.height, np.arange(tree.n_items)))
        table = TableScorer(proportional_scores(tree, leaf))
        qs = layer_probability_vectors(tree, table, hist)
        rows.append("layer\tn_nodes\tmax_abs_q_minus_softmax")
        for j in range(1, tree.height + 1):
            diff = np.abs(qs[j] - layer_softmax(tree, table, hist, j)).max()
            rows.append(f"{j}\t{tree.level_sizes[j]}\t{diff:.3g}")
    else:
        rows.append("layer\tn_nodes\tsum_q\tkl_q_p\tmax_abs_q_minus_p")
        for d in diagnose(tree, scorer, hist):
            rows.append(f"{d.layer}\t{d.n_nodes}\t{d.sum_q:.17g}\t{d.kl:.6g}\t{d.max_bias:.6g}")
    _emit("\n".join(rows) + "\n", args.out)
    return 0


def cmd_synth(args, parser) -> int:
    syn = synth_generate(args.users, args.items, args.concentration, args.seed, args.clusters)
    os.makedirs(args.out, exist_ok=True)
    write_log(os.path.join(args.out, "log.tsv"), syn.rows)
    write_eta_table(os.path.join(args.out, "eta.tsv"), syn.eta)
    with open(os.path.join(args.out, "users.tsv"), "w", encoding="utf-8") as fh:
        fh.writelines(f"{u}\t{k}\n" for u, k in sorted(syn.user_cluster.items()))
    log.info("wrote %d interactions for %d users", len(syn.rows), args.users)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "update-tree": cmd_update_tree,
            "diagnose": cmd_diagnose, "synth": cmd_synth}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(levelname)s %(message)s", stream=sys.stderr)
        with threadpool_limits(max(args.threads, 1)):
            return COMMANDS[args.command](args, parser)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError, TreeFormatError, CheckpointError, DataFormatError,
            TrainingDiverged, AssertionError) as exc:
        print(f"dtr: error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
