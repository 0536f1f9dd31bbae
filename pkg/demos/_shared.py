"""Helpers shared by the demo scripts: output folder and cached benchmark models."""
from pathlib import Path

from twoview import evalkit, metricnet
from twoview.pipeline import BENCH_STAGE_A, BENCH_STAGE_B
from twoview.synthbench import SynthSpec, generate

OUT = Path(__file__).resolve().parent / "output"


def benchmark_context(spec=SynthSpec()):
    """Benchmark split plus both stage models, trained once and cached under ``output/``."""
    split, tax = generate(spec)
    pa, pb = OUT / "model_a.scnn", OUT / "model_b.scnn"
    if pa.is_file() and pb.is_file():
        return evalkit.EvalContext(split.train, split.test, tax, metricnet.load(pa), metricnet.load(pb))
    print("training both stage models (about two minutes on one core)...")
    ctx = evalkit.train_benchmark(split.train, split.test, tax, BENCH_STAGE_A, BENCH_STAGE_B)
    OUT.mkdir(parents=True, exist_ok=True)
    metricnet.save(ctx.model_a, pa)
    metricnet.save(ctx.model_b, pb)
    return ctx
