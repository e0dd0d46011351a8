import numpy as np

from magnet import tensor as tz
from magnet import verify
from magnet.verify import CheckResult, format_report, run_all_checks


def test_fresh_build_all_green():
    results = run_all_checks(seed=0)
    assert len(results) == 8
    failures = [r.name for r in results if not r.passed]
    assert failures == []


def test_report_format():
    results = [
        CheckResult("alpha", True, "fine"),
        CheckResult("beta longer", False, "broke"),
    ]
    report = format_report(results)
    lines = report.splitlines()
    assert lines[0].startswith("alpha")
    assert "PASS" in lines[0] and "FAIL" in lines[1]
    assert lines[-1] == "2 checks, 1 failed"


def test_injected_mask_bug_caught(monkeypatch):
    # attention with no causal mask: every row depends on every node
    def leaky(z_flat, p, layout):
        return tz.matmul(z_flat, tz.transpose(z_flat, (1, 0)))

    monkeypatch.setattr(verify, "causal_mha", leaky)
    result = verify.check_causality(seed=0, trials=20)
    assert not result.passed


def test_injected_cost_sign_bug_caught(monkeypatch):
    # costs credited instead of debited: refund them twice on top
    real = verify.run_backtest

    def buggy(predictions, prices, params, tickers=None):
        state = real(predictions, prices, params, tickers)
        refund = 2.0 * sum(t.cost for t in state.trades)
        state.values = [v + refund for v in state.values]
        return state

    monkeypatch.setattr(verify, "run_backtest", buggy)
    result = verify.check_backtest_oracle(seed=0, trials=20)
    assert not result.passed


def test_injected_gradient_bug_caught(monkeypatch):
    # a loss that reports half the gradient of what it evaluates
    real_loss = verify.loss

    def crooked(probs, labels):
        out = real_loss(probs, labels)
        half = out * 0.5
        # evaluation path unchanged, backward path halved
        half.data = np.array(out.data)
        return half

    monkeypatch.setattr(verify, "loss", crooked)
    result = verify.check_gradients(seed=0)
    assert not result.passed
