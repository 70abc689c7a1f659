"""Independent numerical oracles shared by the test modules.

These deliberately avoid the library's solver plumbing: trajectories are
re-integrated with a local RK4 on explicit node lists and costs are
re-assembled from first principles, so they can arbitrate the
controller's analytic quantities.
"""

import numpy as np

from ergosim.fourier import basis_matrix, lambda_weights


def rk4_span(sys, x0, nodes, control_rule):
    """RK4 over an arbitrary increasing node list, control held per interval."""
    states = np.empty((nodes.size, sys.n))
    x = np.asarray(x0, dtype=float).copy()
    states[0] = x
    for j in range(nodes.size - 1):
        t = nodes[j]
        dt = nodes[j + 1] - t
        u = control_rule(t)
        k1 = sys.f(t, x, u)
        k2 = sys.f(t + dt / 2, x + dt / 2 * k1, u)
        k3 = sys.f(t + dt / 2, x + dt / 2 * k2, u)
        k4 = sys.f(t + dt, x + dt * k3, u)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        states[j + 1] = x
    return states


def windowed_cost(domain, idx, phi, weight, nodes, states_nu, window_len, hist=None):
    """Ergodic cost of a sampled path over a window, by direct quadrature."""
    basis = basis_matrix(domain, idx, states_nu)
    integral = np.trapezoid(basis, nodes, axis=0)
    if hist is not None:
        integral = integral + hist
    diff = integral / window_len - phi
    return weight * float(np.sum(lambda_weights(idx) * diff * diff))


def insertion_cost_slope(
    sys, domain, idx, phi, weight, x0, t_i, horizon, dt, u_def, tau, u_a, lam,
    t0erg=None, hist=None,
):
    """Simulated (J_perturbed - J_default) / lam on one shared augmented grid.

    Sharing the node list between the two rollouts makes the quadrature
    errors cancel in the difference, which is what lets a first-order
    slope at small lam be measured reliably.
    """
    t0erg = t_i if t0erg is None else t0erg
    steps = int(round(horizon / dt))
    base = t_i + dt * np.arange(steps + 1)
    nodes = np.unique(np.concatenate([base, [tau, tau + lam]]))
    window_len = t_i + horizon - t0erg
    proj = list(sys.ergodic_projection)

    def default_rule(t):
        return u_def

    def perturbed_rule(t):
        if tau - 1e-12 <= t < tau + lam - 1e-12:
            return u_a
        return u_def

    states_def = rk4_span(sys, x0, nodes, default_rule)
    states_pert = rk4_span(sys, x0, nodes, perturbed_rule)
    j_def = windowed_cost(domain, idx, phi, weight, nodes, states_def[:, proj], window_len, hist)
    j_pert = windowed_cost(domain, idx, phi, weight, nodes, states_pert[:, proj], window_len, hist)
    return (j_pert - j_def) / lam
