#include <cmath>

#include "doctest.h"
#include "deqrb/gradients.hpp"
#include "oracles.hpp"

using namespace deqrb;

namespace {

LayerParams scalar_model(double w, double u, double b, Activation act = Activation::Identity) {
  LayerParams p;
  p.W = Mat64{{w}};
  p.U = Mat64{{u}};
  p.b = Vec64{b};
  p.V = Mat64{{1.0}, {-1.0}};
  p.r = Vec64{0.0, 0.0};
  p.activation = act;
  return p;
}

// L(z) = cᵀz.
LossFn linear_loss(const Vec64& c) {
  return [c](const Vec64& z) { return LossEval{dot(c, z), c, std::nullopt}; };
}

SolverConfig picard(std::size_t iters) {
  SolverConfig c;
  c.method = SolverMethod::Picard;
  c.max_iters = iters;
  return c;
}

SolverConfig broyden(std::size_t iters) {
  SolverConfig c;
  c.method = SolverMethod::Broyden;
  c.max_iters = iters;
  return c;
}

BackwardConfig backward(std::size_t iters, SolverMethod m = SolverMethod::Picard) {
  BackwardConfig b;
  b.back_max_iters = iters;
  b.back_method = m;
  return b;
}

Mat64 symmetric_with_norm(std::size_t d, double norm, Rng& rng) {
  const Mat64 m = random_uniform(d, d, -1, 1, rng);
  Mat64 s = m;
  s += transpose(m);
  s *= norm / oracle::spectral_norm(s);
  return s;
}

LayerParams linear_model(const Mat64& A, std::size_t l, Rng& rng) {
  LayerParams p;
  p.W = A;
  p.U = random_uniform(A.rows(), l, -1, 1, rng);
  p.b = random_normal(A.rows(), rng);
  p.V = random_uniform(2, A.rows(), -1, 1, rng);
  p.r = Vec64(2);
  p.activation = Activation::Identity;
  return p;
}

double converged_loss(const LayerParams& p, const Vec64& x, std::size_t y) {
  return readout_loss(p, oracle::converged_state(p, x, 400), y).loss;
}

}  // namespace

TEST_CASE("exact gradient closed forms") {
  // W = 0: u* = dLdz after one backward step.
  Rng rng(1);
  LayerParams p = oracle::contractive_model(4, 3, 2, Activation::Tanh, rng);
  p.W = Mat64(4, 4);
  const Vec64 x = random_uniform(3, 0, 1, rng);
  const ForwardTrace fwd = solve(p, x, picard(3));
  const Vec64 dLdz = readout_loss(p, fwd.final_state(), 1).dLdz;
  const Vec64 g = exact_input_grad(p, x, fwd, 1, backward(1));
  CHECK(oracle::rel_err(g, vjp_x(p, fwd.final_state(), x, dLdz)) < 1e-15);

  // f(z; x) = 0.5 z + x, L = z: dL/dx = 1 / (1 - 0.5), dL/db likewise.
  const LayerParams s = scalar_model(0.5, 1.0, 0.0);
  const ForwardTrace sf = solve(s, Vec64{0.3}, broyden(4));
  const LossFn L = linear_loss(Vec64{1.0});
  CHECK(exact_input_grad(s, Vec64{0.3}, sf, L, backward(80))[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(exact_input_grad(s, Vec64{0.3}, sf, L, backward(20, SolverMethod::Broyden))[0] ==
        doctest::Approx(2.0).epsilon(1e-12));
  CHECK(exact_param_grad(s, Vec64{0.3}, sf, L, backward(80)).b[0] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("exact_param_grad with zero loss gradient keeps only the head") {
  Rng rng(2);
  const LayerParams p = oracle::contractive_model(3, 2, 2, Activation::Tanh, rng);
  const Vec64 x = random_uniform(2, 0, 1, rng);
  ParamGrad head = ParamGrad::zeros_like(p);
  head.V(0, 1) = 0.25;
  head.r[1] = -1.0;
  const LossFn flat = [&](const Vec64&) { return LossEval{0.0, Vec64(3), head}; };
  const ParamGrad g = exact_param_grad(p, x, solve(p, x, broyden(8)), flat, backward(7));
  CHECK(g.W == Mat64(3, 3));
  CHECK(g.U == Mat64(3, 2));
  CHECK(g.b == Vec64(3));
  CHECK(g.V == head.V);
  CHECK(g.r == head.r);
}

TEST_CASE("exact gradients match finite differences of the converged loss") {
  Rng rng(3);
  for (int inst = 0; inst < 10; ++inst) {
    const std::size_t d = 6, l = 4;
    const LayerParams p = oracle::contractive_model(d, l, 3, Activation::Tanh, rng, 0.6);
    const Vec64 x = random_uniform(l, 0, 1, rng);
    const std::size_t y = rng.index(3);
    const ForwardTrace fwd = solve(p, x, picard(200));
    CHECK(fwd.rel_errors.back() < 1e-10);

    const Vec64 gx = exact_input_grad(p, x, fwd, y, backward(200));
    const Vec64 fdx = oracle::fd_grad([&](const Vec64& xx) { return converged_loss(p, xx, y); }, x);
    CHECK(oracle::rel_err(gx, fdx) < 1e-4);

    const ParamGrad gt = exact_param_grad(p, x, fwd, y, backward(200));
    const auto fdt = oracle::fd_grad(
        [&](const Vec64& th) {
          LayerParams q = p;
          unflatten_into(q, th.values());
          return converged_loss(q, x, y);
        },
        Vec64(flatten(p)));
    CHECK(oracle::rel_err(flatten(gt), fdt.values()) < 1e-4);
  }
}

TEST_CASE("phantom closed forms") {
  // λ = 1, k = 2 from z* of f = 0.5 z + x with L = z: 1 + 0.5.
  const LayerParams s = scalar_model(0.5, 1.0, 0.0);
  const Vec64 x{0.4};
  const Vec64 zstar{0.8};
  const PhantomResult r = phantom_grads(s, x, zstar, linear_loss(Vec64{1.0}), 2, 1.0);
  CHECK(r.input_grad[0] == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(r.z_end[0] == doctest::Approx(0.8).epsilon(1e-15));

  // k = 1, λ = 1: one application with z_start held constant.
  Rng rng(4);
  const LayerParams p = oracle::contractive_model(5, 3, 2, Activation::Tanh, rng);
  const Vec64 xx = random_uniform(3, 0, 1, rng);
  const Vec64 zs = random_normal(5, rng);
  const PhantomResult one = phantom_grads(p, xx, zs, 1, 1, 1.0);
  const Vec64 f1 = layer_apply(p, zs, xx);
  CHECK(oracle::rel_err(one.input_grad, vjp_x(p, zs, xx, readout_loss(p, f1, 1).dLdz)) < 1e-14);
  CHECK(one.loss == readout_loss(p, f1, 1).loss);

  CHECK_THROWS_AS(phantom_grads(p, xx, zs, 1, 0, 1.0), ContractViolation);
  CHECK_THROWS_AS(phantom_grads(p, xx, zs, 1, 2, 0.0), ContractViolation);
}

TEST_CASE("phantom with many steps approaches the exact gradient") {
  Rng rng(5);
  const LayerParams p = linear_model(symmetric_with_norm(5, 0.6, rng), 3, rng);
  const Vec64 x = random_uniform(3, 0, 1, rng);
  const ForwardTrace fwd = solve(p, x, broyden(30));
  const Vec64 exact = exact_input_grad(p, x, fwd, 0, backward(200));
  const PhantomResult ph = phantom_grads(p, x, fwd.final_state(), 0, 40, 1.0);
  CHECK(linf_norm(ph.input_grad - exact) < 1e-6);
}

TEST_CASE("phantom gradients match finite differences of the k-step objective") {
  Rng rng(6);
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t d = 1 + rng.index(8), l = 1 + rng.index(8);
    const LayerParams p = oracle::contractive_model(d, l, 3, Activation::Tanh, rng, 0.9);
    const Vec64 x = random_uniform(l, 0, 1, rng);
    const Vec64 z0 = random_normal(d, rng);
    const std::size_t y = rng.index(3);
    const std::size_t k = 1 + rng.index(6);
    const double lambda = rng.uniform(0.2, 1.0);

    auto objective = [&](const LayerParams& q, const Vec64& xx) {
      Vec64 z = z0;
      for (std::size_t t = 0; t < k; ++t) z = (1.0 - lambda) * z + lambda * layer_apply(q, z, xx);
      return readout_loss(q, z, y).loss;
    };
    const PhantomResult r = phantom_grads(p, x, z0, y, k, lambda);
    CHECK(r.loss == doctest::Approx(objective(p, x)).epsilon(1e-14));
    const Vec64 fdx = oracle::fd_grad([&](const Vec64& xx) { return objective(p, xx); }, x);
    CHECK(oracle::rel_err(r.input_grad, fdx) < 1e-5);
    const Vec64 fdt = oracle::fd_grad(
        [&](const Vec64& th) {
          LayerParams q = p;
          unflatten_into(q, th.values());
          return objective(q, x);
        },
        Vec64(flatten(p)));
    CHECK(oracle::rel_err(flatten(r.param_grad), fdt.values()) < 1e-5);
  }
}

TEST_CASE("Neumann limit: phantom error decreases monotonically in k") {
  Rng rng(7);
  for (int inst = 0; inst < 10; ++inst) {
    LayerParams p = linear_model(symmetric_with_norm(6, 0.5, rng), 6, rng);
    p.U = Mat64::identity(6);
    const Vec64 x = random_uniform(6, 0, 1, rng);
    const Vec64 zstar = oracle::affine_fixed_point(p.W, matvec(p.U, x) + p.b);
    const LossFn L = linear_loss(random_normal(6, rng));
    // Closed form: (I - A)^{-T} c pushed through Uᵀ.
    const Vec64 exact =
        matvec_t(p.U, oracle::affine_fixed_point(transpose(p.W), L(zstar).dLdz));
    double prev = INFINITY;
    for (std::size_t k : {1, 2, 4, 8, 16, 32}) {
      const double err = l2_norm(phantom_grads(p, x, zstar, L, k, 1.0).input_grad - exact);
      CHECK((err < prev || err <= 1e-12));
      prev = err;
    }
    CHECK(prev <= 1e-8);
  }
}

TEST_CASE("unrolled intermediate gradients") {
  Rng rng(8);
  const LayerParams p = oracle::contractive_model(4, 3, 2, Activation::Tanh, rng);
  const Vec64 x = random_uniform(3, 0, 1, rng);
  const ForwardTrace fwd = solve(p, x, broyden(6));
  const Vec64 at_final = unrolled_intermediate_grad(p, x, fwd, 6, 1, 3, 0.5);
  CHECK(at_final == phantom_grads(p, x, fwd.final_state(), 1, 3, 0.5).input_grad);
  CHECK_THROWS_AS(unrolled_intermediate_grad(p, x, fwd, 7, 1, 3, 0.5), ContractViolation);

  LayerParams flat = p;
  flat.W = Mat64(4, 4);
  const ForwardTrace ff = solve(flat, x, broyden(6));
  const Vec64 g0 = unrolled_intermediate_grad(flat, x, ff, 0, 1, 1, 1.0);
  for (std::size_t n = 1; n <= 6; ++n) CHECK(unrolled_intermediate_grad(flat, x, ff, n, 1, 1, 1.0) == g0);

  // Scalar, n = 0, k = 1: dL/dz at f(0; x) times act'(u x + b) u.
  const LayerParams s = scalar_model(0.7, 1.3, 0.2, Activation::Tanh);
  const ForwardTrace sf = solve(s, Vec64{0.5}, broyden(3));
  const double a = 1.3 * 0.5 + 0.2;
  const double expected = 2.5 * (1.0 - std::tanh(a) * std::tanh(a)) * 1.3;
  CHECK(unrolled_intermediate_grad(s, Vec64{0.5}, sf, 0, linear_loss(Vec64{2.5}), 1, 1.0)[0] ==
        doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("simultaneous adjoint basics") {
  Rng rng(9);
  const LayerParams p = oracle::contractive_model(4, 2, 2, Activation::Tanh, rng);
  const Vec64 x = random_uniform(2, 0, 1, rng);
  const SimultaneousResult sim = simultaneous_adjoint(p, x, 0, broyden(8), 0.3);
  CHECK(sim.adj.adjoints.size() == sim.fwd.states.size());
  CHECK(sim.adj.adjoints[0] == Vec64(4));
  CHECK(sim.adj.residuals[0] == readout_loss(p, Vec64(4), 0).dLdz);
  CHECK_THROWS_AS(simultaneous_adjoint(p, x, 0, picard(8), 0.3), ContractViolation);

  // W = 0 with a linear loss: u_n = (1 - (1 - β)^n) c.
  LayerParams flat = p;
  flat.W = Mat64(4, 4);
  const Vec64 c{1.0, -2.0, 0.5, 3.0};
  const double beta = 0.4;
  const SimultaneousResult fs = simultaneous_adjoint(flat, x, linear_loss(c), broyden(12), beta);
  for (std::size_t n = 0; n <= 12; ++n) {
    const double factor = 1.0 - std::pow(1.0 - beta, static_cast<double>(n));
    CHECK(oracle::rel_err(fs.adj.adjoints[n], factor * c, 1.0) < 1e-12);
  }
}

TEST_CASE("simultaneous adjoint converges on a contractive scalar model") {
  const LayerParams s = scalar_model(0.6, 1.0, 0.1, Activation::Tanh);
  const Vec64 x{0.7};
  const SimultaneousResult sim = simultaneous_adjoint(s, x, 1, broyden(60), 0.5);
  const Vec64& zN = sim.fwd.final_state();
  const Linearization lin(s, zN, x);
  const Vec64 ustar = solve_adjoint(lin, readout_loss(s, zN, 1).dLdz, backward(400));
  CHECK(l2_norm(sim.adj.adjoints.back() - ustar) < 1e-3);
  const Vec64 exact = exact_input_grad(s, x, sim.fwd, 1, backward(400));
  CHECK(l2_norm(adjoint_intermediate_grad(s, x, sim.fwd, sim.adj, 60) - exact) < 1e-3);
  CHECK(adjoint_intermediate_grad(s, x, sim.fwd, sim.adj, 0) == Vec64{0.0});
  CHECK_THROWS_AS(adjoint_intermediate_grad(s, x, sim.fwd, sim.adj, 61), ContractViolation);

  LayerParams nou = s;
  nou.U = Mat64{{0.0}};
  const SimultaneousResult z = simultaneous_adjoint(nou, x, 1, broyden(10), 0.5);
  for (std::size_t n = 0; n <= 10; ++n) CHECK(adjoint_intermediate_grad(nou, x, z.fwd, z.adj, n) == Vec64{0.0});
}

Mat64 exact_inverse_jacobian(const Mat64& A) {
  Mat64 jg = A;
  jg += Mat64::identity(A.rows(), -1.0);
  return oracle::from_eigen(Eigen::MatrixXd(oracle::to_eigen(jg).inverse()));
}

TEST_CASE("adjoint alignment on linear models") {
  // With a linear loss the exact adjoint at every z_n is the same w. The
  // forward solver starts from the exact inverse Jacobian, as on a model
  // whose Broyden estimate has converged.
  Rng rng(10);
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t d = 2 + rng.index(5);
    const LayerParams p = linear_model(symmetric_with_norm(d, 0.5, rng), 2, rng);
    const Vec64 x = random_uniform(2, 0, 1, rng);
    const Vec64 c = random_normal(d, rng);
    const Vec64 w = oracle::affine_fixed_point(transpose(p.W), c);
    SolverConfig cfg = broyden(12);
    cfg.initial_inverse = exact_inverse_jacobian(p.W);
    cfg.broyden_alpha = 0.5;
    const SimultaneousResult sim = simultaneous_adjoint(p, x, linear_loss(c), cfg, rng.uniform(0.1, 0.9));
    const auto& u = sim.adj.adjoints;
    for (std::size_t n = 0; n + 1 < u.size(); ++n) {
      for (std::size_t m = 0; m <= n; ++m) CHECK(l2_norm(u[n + 1] - w) <= l2_norm(u[m] - w) + 1e-9);
    }
  }
}

TEST_CASE("adjoint convergence ratio") {
  Rng rng(11);
  const std::size_t d = 5;
  const Mat64 A = symmetric_with_norm(d, 0.7, rng);
  const LayerParams p = linear_model(A, 2, rng);
  const Vec64 x = random_uniform(2, 0, 1, rng);
  const Vec64 c = random_normal(d, rng);
  const Vec64 ustar = oracle::affine_fixed_point(transpose(A), c);
  const Mat64 exact_inverse = exact_inverse_jacobian(A);

  // A half step keeps the forward residual away from roundoff, where the
  // rank-one update would start fitting noise.
  SUBCASE("exact inverse: every ratio is 1 - beta") {
    for (double beta : {0.25, 0.5, 0.75}) {
      SolverConfig cfg = broyden(10);
      cfg.initial_inverse = exact_inverse;
      cfg.broyden_alpha = 0.5;
      const SimultaneousResult sim = simultaneous_adjoint(p, x, linear_loss(c), cfg, beta);
      const auto ratios = adjoint_convergence_ratio(sim.adj, ustar);
      REQUIRE(!ratios.empty());
      for (double r : ratios) CHECK(r <= 1.0 - beta + 1e-6);
    }
  }
  SUBCASE("near-exact inverse: tail below one") {
    Mat64 near = exact_inverse;
    near += random_uniform(d, d, -0.01, 0.01, rng);
    SolverConfig cfg = broyden(10);
    cfg.initial_inverse = near;
    const SimultaneousResult sim = simultaneous_adjoint(p, x, linear_loss(c), cfg, 0.5);
    const auto ratios = adjoint_convergence_ratio(sim.adj, ustar);
    REQUIRE(ratios.size() >= 3);
    for (std::size_t i = ratios.size() - 3; i < ratios.size(); ++i) CHECK(ratios[i] < 1.0);
  }
  SUBCASE("stationary and converged iterates") {
    const SimultaneousResult still = simultaneous_adjoint(p, x, linear_loss(c), broyden(5), 0.0);
    for (double r : adjoint_convergence_ratio(still.adj, ustar)) CHECK(r == 1.0);
    AdjointTrace at_star;
    at_star.adjoints = {ustar, ustar, ustar};
    CHECK(adjoint_convergence_ratio(at_star, ustar).empty());
  }
}

TEST_CASE("ensemble_grad") {
  const Vec64 g{1.0, -2.0};
  CHECK(ensemble_grad(std::vector<Vec64>{g, g, g}) == g);
  CHECK(ensemble_grad(std::vector<Vec64>{g, -1.0 * g}) == Vec64{0.0, 0.0});
  CHECK(ensemble_grad(std::vector<Vec64>{{1, 0}, {0, 1}, {2, 2}}) == Vec64{1.0, 1.0});
  CHECK_THROWS_AS(ensemble_grad(std::vector<Vec64>{}), ContractViolation);

  Rng rng(12);
  for (int t = 0; t < 100; ++t) {
    std::vector<Vec64> gs;
    const std::size_t n = 1 + rng.index(8);
    Vec64 sum(6);
    for (std::size_t i = 0; i < n; ++i) {
      gs.push_back(random_normal(6, rng));
      sum += gs.back();
    }
    const Vec64 s1 = sign(sum), s2 = sign(ensemble_grad(gs));
    for (std::size_t j = 0; j < 6; ++j)
      if (sum[j] != 0.0) CHECK(s1[j] == s2[j]);
  }
}

TEST_CASE("every gradient source runs through source_gradient") {
  Rng rng(13);
  const LayerParams p = oracle::contractive_model(5, 3, 2, Activation::Tanh, rng);
  const Vec64 x = random_uniform(3, 0, 1, rng);
  const SolverConfig scfg = broyden(6);
  const BackwardConfig bcfg = backward(7);
  const ForwardTrace fwd = solve(p, x, scfg);

  CHECK(source_gradient(p, x, 1, GradientSource::exact_final(), scfg, bcfg).grad ==
        exact_input_grad(p, x, fwd, 1, bcfg));
  CHECK(source_gradient(p, x, 1, GradientSource::phantom_final(3, 0.5), scfg, bcfg).grad ==
        phantom_grads(p, x, fwd.final_state(), 1, 3, 0.5, false).input_grad);
  CHECK(source_gradient(p, x, 1, GradientSource::unrolled_intermediate(2, 2, 0.5), scfg, bcfg).grad ==
        unrolled_intermediate_grad(p, x, fwd, 2, 1, 2, 0.5));

  const SimultaneousResult sim = simultaneous_adjoint(p, x, 1, scfg, 0.5);
  CHECK(source_gradient(p, x, 1, GradientSource::adjoint_intermediate(3, 0.5), scfg, bcfg).grad ==
        adjoint_intermediate_grad(p, x, sim.fwd, sim.adj, 3));

  std::vector<Vec64> adj, unr;
  for (std::size_t n = 1; n <= 6; ++n) {
    adj.push_back(adjoint_intermediate_grad(p, x, sim.fwd, sim.adj, n));
    unr.push_back(unrolled_intermediate_grad(p, x, fwd, n, 1, 2, 0.5));
  }
  CHECK(oracle::rel_err(source_gradient(p, x, 1, GradientSource::adjoint_ensemble(0.5), scfg, bcfg).grad,
                        ensemble_grad(adj)) < 1e-15);
  CHECK(oracle::rel_err(source_gradient(p, x, 1, GradientSource::unrolled_ensemble(2, 0.5), scfg, bcfg).grad,
                        ensemble_grad(unr)) < 1e-15);

  CHECK_THROWS_AS(source_gradient(p, x, 1, GradientSource::adjoint_intermediate(7), scfg, bcfg), ContractViolation);
  CHECK(GradientSource::unrolled_intermediate(1, 2, 0.5).label() == "unrolled_intermediate(n=1,k=2,lambda=0.5)");
  CHECK(GradientSource::adjoint_ensemble(0.25).label() == "adjoint_ensemble(beta=0.25)");
  for (SourceKind k : {SourceKind::ExactFinal, SourceKind::PhantomFinal, SourceKind::UnrolledIntermediate,
                       SourceKind::AdjointIntermediate, SourceKind::AdjointEnsemble, SourceKind::UnrolledEnsemble})
    CHECK(source_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(source_kind_from_string("square"), FormatError);
}

TEST_CASE("backward divergence carries the partial adjoint") {
  const LayerParams s = scalar_model(1e200, 1.0, 0.0);
  ForwardTrace fwd;
  fwd.states = {Vec64{0.0}, Vec64{1.0}};
  try {
    exact_input_grad(s, Vec64{0.0}, fwd, linear_loss(Vec64{1e200}), backward(10));
    FAIL("expected BackwardDivergenceError");
  } catch (const BackwardDivergenceError& e) {
    CHECK(e.partial().size() == 1);
  }
}
