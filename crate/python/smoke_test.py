"""Exercise the d3pmlab extension module end to end."""

import math

import d3pmlab


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    docs = ["a b c d " * 50]
    tok = d3pmlab.Tokenizer.train(docs, 12, alphabet="observed")
    ids = tok.encode("a b c d a b")
    assert tok.decode(ids) == "a b c d a b"
    assert tok.mask_id == tok.specials()["mask"]
    same = d3pmlab.Tokenizer.from_json(tok.to_json())
    assert same.fingerprint() == tok.fingerprint()
    print(f"tokenizer: {tok!r}, {len(ids)} ids")

    sched = d3pmlab.NoiseSchedule(50)
    bars = sched.alpha_bars()
    assert len(bars) == 51
    for i, a in enumerate(bars):
        assert close(a, 1 - i / 50), (i, a)
    print(f"schedule: {sched!r}")

    m = 5
    closed = d3pmlab.cumulative_matrix(sched, 20, m)
    product = d3pmlab.cumulative_matrix_product(sched, 20, m)
    worst = max(abs(x - y) for r, s in zip(closed, product) for x, y in zip(r, s))
    assert worst < 1e-12, worst
    assert d3pmlab.forward_marginal(2, sched, 20, m) == closed[2]
    print(f"matrices: closed form vs product {worst:.1e}")

    x0 = [0.0] * (m + 1)
    x0[3] = 1.0
    post = d3pmlab.posterior(m, x0, sched, 30, 10)
    expected = (bars[10] - bars[30]) / (1 - bars[30])
    assert close(post[3], expected) and close(post[m], 1 - expected)
    print(f"posterior: unmask mass {post[3]:.6f}")

    rows = [[0, 1, 2, 3] * 64 for _ in range(16)]
    noisy = d3pmlab.forward_sample(rows, sched, 25, m, 7)
    frac = sum(t == m for r in noisy for t in r) / (16 * 256)
    assert abs(frac - 0.5) < 0.05, frac
    print(f"forward sample: masked fraction {frac:.4f}")

    assert d3pmlab.kl_categorical([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert close(d3pmlab.bpt(math.log(2)), 1.0)
    assert close(d3pmlab.ppl(1.0), math.e)
    mean, std = d3pmlab.mean_std([1.0, 3.0])
    assert (mean, std) == (2.0, 1.0)
    try:
        d3pmlab.posterior(m, x0, sched, 10, 30)
    except ValueError as e:
        print(f"errors: {e}")
    else:
        raise AssertionError("bad times accepted")

    passed, report = d3pmlab.verify()
    print(report, end="")
    assert passed
    print("smoke test passed")


if __name__ == "__main__":
    main()
