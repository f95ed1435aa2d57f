import itertools
import math

import numpy as np
import pytest

from crossrank.attention import AttentionParams, central_difference, relative_error
from crossrank.losses import (
    AttentionFeatures,
    DomainBatch,
    LossError,
    LossWeights,
    cad_loss,
    cad_total,
    cross_domain_triplet_loss,
    cross_entropy_loss,
    distillation_features,
    total_loss,
    triplet_term,
)


def enumerate_triplet(x, lx, y, ly, eps, same):
    """Enumerate every (anchor, positive, negative) triple; per anchor keep
    the worst (maximum) hinge value, which is the batch-hard choice."""
    per_anchor = []
    for i in range(len(x)):
        worst = -math.inf
        for p, n in itertools.product(range(len(y)), repeat=2):
            if ly[p] != lx[i] or ly[n] == lx[i] or (same and p == i):
                continue
            d_p = math.dist(x[i], y[p])
            d_n = math.dist(x[i], y[n])
            worst = max(worst, d_p - d_n)
        per_anchor.append(max(worst + eps, 0.0))
    return sum(per_anchor) / len(per_anchor)


def random_batch(rng, n=8, dim=4, classes=3, logits=True):
    la = np.arange(n) % classes
    lb = (np.arange(n) + 1) % classes
    return DomainBatch(
        rng.normal(size=(n, dim)),
        rng.normal(size=(n, dim)),
        la,
        lb,
        rng.normal(size=(n, classes)) if logits else None,
        rng.normal(size=(n, classes)) if logits else None,
    )


class TestTriplet:
    def test_hinge_examples(self):
        # anchor at 0; positive at 0.5, negative at 1.0 (and vice versa)
        a = np.array([[0.0]])
        for d_pos, d_neg, expected in ((0.5, 1.0, 0.0), (1.0, 0.5, 0.8)):
            b = DomainBatch(a, np.array([[d_pos], [d_neg]]), [0], [0, 1])
            assert triplet_term("A", "B", b, 0.3) == pytest.approx(expected)

    @pytest.mark.parametrize("m1,m2", [("A", "A"), ("B", "B"), ("A", "B"), ("B", "A")])
    def test_enumeration_oracle(self, rng, m1, m2):
        b = random_batch(rng)
        x, y = b.embeddings(m1).tolist(), b.embeddings(m2).tolist()
        ref = enumerate_triplet(x, b.labels(m1).tolist(), y, b.labels(m2).tolist(), 0.3, m1 == m2)
        assert triplet_term(m1, m2, b, 0.3) == pytest.approx(ref, rel=1e-12)

    def test_sum_of_four(self, rng):
        b = random_batch(rng)
        parts = [triplet_term(m1, m2, b) for m1, m2 in (("A", "A"), ("B", "B"), ("A", "B"), ("B", "A"))]
        assert cross_domain_triplet_loss(b) == sum(parts)

    def test_separated_clusters_zero(self):
        e = np.array([[0.0, 0.0], [0.0, 0.1], [10.0, 0.0], [10.0, 0.1]])
        b = DomainBatch(e, e + 0.01, [0, 0, 1, 1], [0, 0, 1, 1])
        assert cross_domain_triplet_loss(b) == 0.0

    def test_symmetric_batch(self, rng):
        e = rng.normal(size=(6, 3))
        lab = [0, 0, 1, 1, 2, 2]
        b = DomainBatch(e, e, lab, lab)
        assert triplet_term("A", "B", b) == triplet_term("B", "A", b)

    def test_rotation_invariance(self, rng):
        b = random_batch(rng)
        rot, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        turned = b.with_embeddings(b.embeddings_a @ rot, b.embeddings_b @ rot)
        assert cross_domain_triplet_loss(turned) == pytest.approx(cross_domain_triplet_loss(b), abs=1e-6)

    def test_missing_positive_names_class(self):
        b = DomainBatch(np.zeros((2, 2)), np.ones((2, 2)), [0, 7], [0, 1])
        with pytest.raises(LossError, match="class 7"):
            triplet_term("A", "B", b)

    def test_within_domain_excludes_self(self):
        b = DomainBatch(np.eye(2), np.eye(2), [0, 1], [0, 1])
        with pytest.raises(LossError, match="no positive"):
            triplet_term("A", "A", b)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        b = random_batch(rng, n=6, dim=3, logits=False)
        eps = 0.3
        loss, grads = cross_domain_triplet_loss(b, eps, return_grad=True)

        def f_a(x):
            return cross_domain_triplet_loss(b.with_embeddings(x, b.embeddings_b), eps)

        def f_b(x):
            return cross_domain_triplet_loss(b.with_embeddings(b.embeddings_a, x), eps)

        assert relative_error(grads["A"], central_difference(f_a, b.embeddings_a)) < 1e-4
        assert relative_error(grads["B"], central_difference(f_b, b.embeddings_b)) < 1e-4


class TestDistillation:
    def test_identity(self, rng):
        x = rng.normal(size=(3, 4))
        assert cad_loss(x, x) == 0.0
        assert cad_loss(x, x, form="mse") == 0.0

    def test_positive(self):
        assert cad_loss([[5.0, 0.0]], [[1.0, 1.0]]) > 0

    def test_elementwise_oracle(self, rng):
        t, s = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        total = 0.0
        for tr, sr in zip(t, s):
            p = np.exp(tr) / np.exp(tr).sum()
            q = np.exp(sr) / np.exp(sr).sum()
            total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q))
        assert cad_loss(t, s) == pytest.approx(total / 2, abs=1e-8)

    def test_gradient(self, rng):
        t, s = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        for form in ("kl", "mse"):
            _, g = cad_loss(t, s, 2.0, form, return_grad=True)
            numeric = central_difference(lambda x: cad_loss(t, x, 2.0, form), s)
            assert relative_error(g, numeric) < 1e-4

    def test_errors(self):
        with pytest.raises(LossError):
            cad_loss(np.ones((2, 2)), np.ones((2, 3)))
        with pytest.raises(LossError):
            cad_loss(np.ones((2, 2)), np.ones((2, 2)), temperature=0)
        with pytest.raises(LossError):
            cad_loss(np.ones((2, 2)), np.ones((2, 2)), form="l1")

    def test_features(self, rng):
        teacher = AttentionParams.random(4, 3, rng)
        student = AttentionParams.random(4, 3, rng)
        ta, tb = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 5, 4))
        feats = distillation_features(ta, tb, teacher, student)
        assert feats.teacher_ba.shape == (2, 3)
        same = distillation_features(ta, tb, teacher, teacher)
        # with shared weights F(A,A) and F(B,A) still differ, so the loss is generally positive
        assert cad_total(same) >= 0


class TestCrossEntropy:
    def test_uniform(self):
        for C in (2, 5, 17):
            assert cross_entropy_loss(np.zeros((3, C)), [0, 1, 1]) == pytest.approx(math.log(C), abs=1e-9)

    def test_confident(self):
        z = np.zeros((1, 4))
        z[0, 2] = 50.0
        assert cross_entropy_loss(z, [2]) < 1e-20

    def test_oracle(self, rng):
        z = rng.normal(size=(4, 5))
        y = [0, 4, 2, 2]
        ref = sum(-math.log(math.exp(r[t]) / sum(math.exp(v) for v in r)) for r, t in zip(z, y)) / 4
        assert cross_entropy_loss(z, y) == pytest.approx(ref, abs=1e-8)

    def test_label_range(self):
        with pytest.raises(LossError):
            cross_entropy_loss(np.zeros((1, 3)), [3])

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        z = rng.normal(size=(4, 5))
        y = rng.integers(0, 5, size=4)
        _, g = cross_entropy_loss(z, y, return_grad=True)
        assert relative_error(g, central_difference(lambda x: cross_entropy_loss(x, y), z)) < 1e-4


class TestTotal:
    def features(self, rng):
        return AttentionFeatures(*(rng.normal(size=(2, 3)) for _ in range(4)))

    def test_all_zero(self, rng):
        w = LossWeights(0, 0, 0)
        assert total_loss(random_batch(rng), None, w).total == 0.0

    def test_triplet_only(self, rng):
        b = random_batch(rng)
        out = total_loss(b, None, LossWeights(1, 0, 0))
        assert out.total == cross_domain_triplet_loss(b)

    def test_breakdown(self, rng):
        b, f = random_batch(rng), self.features(rng)
        out = total_loss(b, f, LossWeights())
        ce = cross_entropy_loss(b.logits_a, b.labels_a) + cross_entropy_loss(b.logits_b, b.labels_b)
        assert out.terms["ce"] == pytest.approx(ce)
        assert out.terms["cad"] == pytest.approx(cad_total(f))
        assert out.total == pytest.approx(sum(out.terms.values()))
        assert set(out.as_dict()) == {"total", "triplet", "cad", "ce"}

    def test_linear_in_lambda(self, rng):
        b, f = random_batch(rng), self.features(rng)
        base = total_loss(b, f, LossWeights(1, 1, 1)).total
        for field_ in ("lambda_triplet", "lambda_cad", "lambda_ce"):
            vals = [total_loss(b, f, LossWeights(**{field_: lam})).total for lam in (0.0, 1.0, 2.0, 3.5)]
            slope = vals[2] - vals[1]
            assert vals[1] == pytest.approx(base)
            assert vals[0] == pytest.approx(vals[1] - slope)
            assert vals[3] == pytest.approx(vals[1] + 2.5 * slope)

    def test_missing_inputs(self, rng):
        with pytest.raises(LossError):
            total_loss(random_batch(rng), None, LossWeights())
        with pytest.raises(LossError):
            total_loss(random_batch(rng, logits=False), None, LossWeights(lambda_cad=0))

    def test_weight_validation(self):
        with pytest.raises(LossError):
            LossWeights(lambda_ce=-1)
        with pytest.raises(LossError):
            LossWeights(temperature=0)
