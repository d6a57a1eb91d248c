"""Smoke test for the oprlab_py extension.

Build with `maturin develop -m crates/py/Cargo.toml`, or
`cargo build -p oprlab-py --features extension-module` and copy
target/debug/liboprlab_py.so next to this file as oprlab_py.so.
"""
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import oprlab_py as op  # noqa: E402

rows = [[50.0], [40.0, 80.0]]
assert math.isclose(op.bwt(rows), -10.0)
assert math.isclose(op.overall_acc(rows), 60.0)

assert op.allocate_budget(50, 3) == [17, 17, 16]

p = op.Policy.tabular(4, 5, 3, 2, eos=3, scale=1.0, seed=1)
tokens, logps = p.sample([0, 1, 2], temperature=1.0, seed=7)
total, per_tok = p.sequence_logprob([0, 1, 2], tokens)
assert math.isclose(total, sum(logps), rel_tol=1e-9)
assert math.isclose(total, sum(per_tok), rel_tol=1e-9)
assert op.kl(p, p, [[0, 1, 2]]) < 1e-12

loss, grad = p.loss_and_grad([([0, 1, 2], tokens)])
assert len(grad) == p.num_params and loss > 0

stream = op.TaskStream(toy=True)
assert len(stream) == 2
prompt, gold = stream.train_examples(0)[0]
assert stream.rule_score(0, prompt, gold) == 1.0

toml = """
schema_version = 1
name = "py-smoke"
methods = [{ name = "seq-sft" }]
[stream]
kinds = ["reverse", "parity-classify"]
n_train = 40
n_eval = 20
[model]
backend = "mlp"
embed_dim = 8
hidden_dim = 16
[optim]
epochs = [1, 1]
"""
out = op.run_config(toml)
m = out["seq-sft"]["matrices"][0]
assert len(m) == 2 and len(m[1]) == 2
print("ok", stream.names, out["seq-sft"]["acc"])
