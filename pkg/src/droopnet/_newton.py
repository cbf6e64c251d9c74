import numpy as np


class NewtonFailure(Exception):
    def __init__(self, residual, iterations, reason):
        self.residual = residual
        self.iterations = iterations
        super().__init__(f"{reason} after {iterations} iterations (residual {residual:.3e})")


def damped_newton(residual, jacobian, x0, tol, maxiter=50, min_damping=2.0**-12, polish=False):
    """Newton iteration with backtracking on the max-norm of the residual.

    With ``polish`` one extra full step is attempted after convergence, which drives the
    residual to rounding level and keeps the solution a smooth function of the inputs.
    Returns ``(x, residual_norm, iterations)``; raises :class:`NewtonFailure`.
    """
    x = np.array(x0, dtype=float)
    r = residual(x)
    nr = float(np.max(np.abs(r))) if r.size else 0.0
    for it in range(maxiter):
        if nr <= tol:
            if polish and nr > 0:
                x, nr = _polish(residual, jacobian, x, r, nr)
            return x, nr, it
        try:
            dx = np.linalg.solve(jacobian(x), -r)
        except np.linalg.LinAlgError:
            raise NewtonFailure(nr, it, "singular Jacobian") from None
        if not np.all(np.isfinite(dx)):
            raise NewtonFailure(nr, it, "non-finite Newton step")
        step = 1.0
        while True:
            x_new = x + step * dx
            r_new = residual(x_new)
            nr_new = float(np.max(np.abs(r_new)))
            if nr_new < (1.0 - 1e-4 * step) * nr or step <= min_damping:
                break
            step *= 0.5
        if not nr_new < nr:
            raise NewtonFailure(nr, it + 1, "line search stalled")
        x, r, nr = x_new, r_new, nr_new
    if nr <= tol:
        return x, nr, maxiter
    raise NewtonFailure(nr, maxiter, "no convergence")


def _polish(residual, jacobian, x, r, nr):
    try:
        x_new = x + np.linalg.solve(jacobian(x), -r)
    except np.linalg.LinAlgError:
        return x, nr
    nr_new = float(np.max(np.abs(residual(x_new))))
    return (x_new, nr_new) if nr_new <= nr else (x, nr)


def fd_jacobian(fun, x, f0=None, rel_step=1e-7):
    """Forward-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = fun(x) if f0 is None else f0
    J = np.empty((f0.shape[0], x.shape[0]))
    for k in range(x.shape[0]):
        h = rel_step * max(1.0, abs(x[k]))
        xk = x.copy()
        xk[k] += h
        J[:, k] = (fun(xk) - f0) / h
    return J
