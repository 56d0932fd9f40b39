from pathlib import Path

import numpy as np
import pytest

from vlmatch import encoders as E
from vlmatch import synthdata as S

# smallest configuration every component accepts
TINY = E.EncoderConfig(dim=2, layers=1, heads=1, vocab_size=5, max_text_len=2, patch_grid=1,
                       patch_dim=2, proj_dim=2, mlp_ratio=1)
SMALL = E.EncoderConfig(dim=8, layers=1, heads=2, vocab_size=32, max_text_len=8, patch_grid=2,
                        patch_dim=4, proj_dim=4, mlp_ratio=2)


def jittered(cfg, seed=0, scale=0.3):
    """Init params plus noise so zero biases and unit gains do not hide gradient bugs."""
    p = E.init_params(cfg, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for _, t in p.named():
        t.data = t.data + rng.normal(0.0, scale, t.shape)
    return p


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture(scope="session")
def small_corpus():
    return S.generate_corpus(S.GenConfig(n_items=64, vocab_size=32, text_len=8, patch_grid=2,
                                         patch_dim=4, latent_dim=4, quant_levels=4, seed=7))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# a full command chain on a toy corpus; shared by the cli tests and the acceptance suite
CLI_CONFIG = {
    "gen": {"n_items": 48, "vocab_size": 32, "text_len": 8, "patch_grid": 2, "patch_dim": 4,
            "latent_dim": 4, "quant_levels": 4},
    "encoder": SMALL.to_dict(),
    "train": {"steps": 4, "batch_size": 8, "queue_size": 16},
    "index": {"M": 4, "ef_construction": 16},
    "match": {"k_retrieve": 10, "k_final": 4, "ef_search": 16},
}


def cli_chain(root):
    """Run every command once; return {command: output path}."""
    from vlmatch.cli import main
    import json

    root.mkdir(parents=True, exist_ok=True)
    conf = root / "config.json"
    conf.write_text(json.dumps(CLI_CONFIG))
    c = ["--config", str(conf), "--seed", "3"]
    out = {k: root / k for k in ("data", "base.vlmt", "teacher.vlmt", "student.vlmt", "index.vlix",
                                 "report.jsonl", "eval.json", "ablation.json")}
    runs = [
        ["gen", *c, "--out", str(out["data"])],
        ["pretrain", *c, "--data", str(out["data"]), "--out", str(out["base.vlmt"])],
        ["finetune_relevance", *c, "--data", str(out["data"]), "--base", str(out["base.vlmt"]),
         "--out", str(out["teacher.vlmt"])],
        ["finetune_retrieval", *c, "--data", str(out["data"]), "--base", str(out["base.vlmt"]),
         "--teacher", str(out["teacher.vlmt"]), "--lam", "0.5", "--out", str(out["student.vlmt"])],
        ["index", *c, "--retrieval", str(out["student.vlmt"]), "--data", str(out["data"]),
         "--out", str(out["index.vlix"])],
        ["match", *c, "--index", str(out["index.vlix"]), "--retrieval", str(out["student.vlmt"]),
         "--relevance", str(out["teacher.vlmt"]), "--data", str(out["data"]), "--out", str(out["report.jsonl"])],
        ["eval", *c, "--report", str(out["report.jsonl"]), "--data", str(out["data"]),
         "--out", str(out["eval.json"])],
        ["ablation", *c, "--data", str(out["data"]), "--base", str(out["base.vlmt"]),
         "--teacher", str(out["teacher.vlmt"]), "--steps", "2", "--out", str(out["ablation.json"])],
    ]
    for argv in runs:
        status = main(argv)
        if status != 0:
            raise RuntimeError(f"{argv[0]} exited {status}")
    return {argv[0]: Path(argv[argv.index("--out") + 1]) for argv in runs}


def artifact_bytes(out_path):
    """Bytes of every artifact a command wrote, read from its manifest."""
    import json

    doc = json.loads(Path(str(out_path) + ".manifest.json").read_text())
    files = {}
    for o in doc["outputs"]:
        p = Path(o)
        for f in sorted(p.rglob("*")) if p.is_dir() else [p]:
            files[str(f)] = f.read_bytes()
    return files


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    return cli_chain(tmp_path_factory.mktemp("cli"))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
