"""Hot loops of the state-goal network, the meta table and k-means.

Every kernel has a ``*_nb`` version (explicit loops, compiled by numba) and a
``*_np`` version (vectorized numpy). The public names at the bottom of the
module are bound to one of the two according to :mod:`hrlrooms._accel`. The
two versions agree to floating point rounding; tests check that directly.

Shapes used throughout:

    w1        (R, H, D)   per gate row, hidden x state-code weights
    w2        (R, A, H)   per gate row, action x hidden weights
    s_code    (D,)        Gaussian code of a state
    rows      (n,) int64  gate rows active for the current goal
"""
import numpy as np

from ._accel import njit, pick

SUPPRESSED = -30.0
# activity of a losing unit
H_FLOOR = 1.0 / (1.0 + np.exp(-SUPPRESSED))


# ---------------------------------------------------------------- numba path

@njit
def gaussian_code_nb(px, py, centers, sigma):
    n = centers.shape[0]
    out = np.empty(n)
    inv = 1.0 / (2.0 * sigma * sigma)
    for i in range(n):
        dx = px - centers[i, 0]
        dy = py - centers[i, 1]
        out[i] = np.exp(-(dx * dx + dy * dy) * inv)
    return out


@njit
def gate_rows_nb(px, py, centers, sigma, threshold):
    code = gaussian_code_nb(px, py, centers, sigma)
    count = 0
    for i in range(code.shape[0]):
        if code[i] > threshold:
            count += 1
    rows = np.empty(count, dtype=np.int64)
    j = 0
    for i in range(code.shape[0]):
        if code[i] > threshold:
            rows[j] = i
            j += 1
    return rows


@njit
def kwta_mask_nb(net, k):
    """Winners of ``net``: the k largest entries, ties to the lowest index."""
    n = net.shape[0]
    k = min(k, n)
    won = np.zeros(n, dtype=np.bool_)
    top = np.empty(k, dtype=np.int64)  # descending by value, stable in index
    filled = 0
    for j in range(n):
        v = net[j]
        if filled == k and not v > net[top[k - 1]]:
            continue
        pos = filled if filled < k else k - 1
        while pos > 0 and v > net[top[pos - 1]]:
            top[pos] = top[pos - 1]
            pos -= 1
        top[pos] = j
        if filled < k:
            filled += 1
    for m in range(k):
        won[top[m]] = True
    return won


@njit(fastmath=True)
def _dot(u, v):
    # reassociated sum so the loop vectorizes
    acc = 0.0
    for d in range(u.shape[0]):
        acc += u[d] * v[d]
    return acc


@njit
def forward_nb(w1, w2, s_code, rows, k, h_out):
    """q over actions; fills ``h_out[r]`` with the hidden activity of ``rows[r]``."""
    n_act = w2.shape[1]
    n_hid = w1.shape[1]
    n_in = w1.shape[2]
    q = np.zeros(n_act)
    net = np.empty(n_hid)
    for r in range(rows.shape[0]):
        i = rows[r]
        for j in range(n_hid):
            net[j] = _dot(w1[i, j], s_code)
        won = kwta_mask_nb(net, k)
        for j in range(n_hid):
            h_out[r, j] = 1.0 / (1.0 + np.exp(-net[j])) if won[j] else H_FLOOR
        for a in range(n_act):
            q[a] += _dot(w2[i, a], h_out[r])
    return q


@njit
def backprop_nb(w1, w2, s_code, rows, h, a, delta, alpha, k):
    """Gradient step on q(s, g, a) scaled by ``delta``.

    Losing units carry the suppressed input, so only the k winners (the units
    with h above sigmoid(SUPPRESSED)) pass error back to w1.
    """
    n_hid = w1.shape[1]
    n_in = w1.shape[2]
    for r in range(rows.shape[0]):
        i = rows[r]
        for j in range(n_hid):
            hj = h[r, j]
            if hj > H_FLOOR:
                err = delta * w2[i, a, j] * hj * (1.0 - hj)
                step = alpha * err
                for d in range(n_in):
                    w1[i, j, d] += step * s_code[d]
        for j in range(n_hid):
            w2[i, a, j] += alpha * delta * h[r, j]


@njit
def q_values_nb(w1, w2, s_code, rows, k):
    h = np.empty((rows.shape[0], w1.shape[1]))
    return forward_nb(w1, w2, s_code, rows, k, h)


@njit
def td_step_nb(w1, w2, code, code_next, gx, gy, a, reward, bootstrap, gamma, alpha, k,
               goal_centers, goal_sigma, threshold):
    rows = gate_rows_nb(gx, gy, goal_centers, goal_sigma, threshold)
    target = reward
    if bootstrap:
        target += gamma * np.max(q_values_nb(w1, w2, code_next, rows, k))
    h = np.empty((rows.shape[0], w1.shape[1]))
    q = forward_nb(w1, w2, code, rows, k, h)
    delta = target - q[a]
    backprop_nb(w1, w2, code, rows, h, a, delta, alpha, k)
    return delta


@njit
def td_batch_nb(w1, w2, codes, s_idx, next_idx, goals, actions, rewards, bootstrap,
                gamma, alpha, k, goal_centers, goal_sigma, threshold):
    """Sequential Q-learning updates over a sampled minibatch.

    ``codes[c]`` is the state code of cell index ``c``; ``bootstrap[b]`` is
    False for entries whose target is the bare reward. Returns the TD errors.
    """
    n = s_idx.shape[0]
    deltas = np.empty(n)
    for b in range(n):
        deltas[b] = td_step_nb(w1, w2, codes[s_idx[b]], codes[next_idx[b]], goals[b, 0],
                               goals[b, 1], actions[b], rewards[b], bootstrap[b], gamma,
                               alpha, k, goal_centers, goal_sigma, threshold)
    return deltas


@njit
def td_slots_nb(w1, w2, codes, width, s_col, next_col, goal_col, a_col, r_col, attained_col,
                terminal_col, slots, gamma, alpha, k, goal_centers, goal_sigma, threshold):
    """``td_batch`` reading straight from controller-memory columns at ``slots``."""
    for b in range(slots.shape[0]):
        i = slots[b]
        ci = s_col[i, 1] * width + s_col[i, 0]
        cn = next_col[i, 1] * width + next_col[i, 0]
        boot = not (attained_col[i] or terminal_col[i])
        td_step_nb(w1, w2, codes[ci], codes[cn], goal_col[i, 0], goal_col[i, 1], a_col[i],
                   r_col[i], boot, gamma, alpha, k, goal_centers, goal_sigma, threshold)


@njit
def sarsa_nb(w1, w2, code, code_next, rows, a, a_next, reward, terminal, gamma, alpha, k):
    n_hid = w1.shape[1]
    target = reward
    if not terminal:
        target += gamma * q_values_nb(w1, w2, code_next, rows, k)[a_next]
    h = np.empty((rows.shape[0], n_hid))
    q = forward_nb(w1, w2, code, rows, k, h)
    delta = target - q[a]
    backprop_nb(w1, w2, code, rows, h, a, delta, alpha, k)
    return delta


@njit
def nearest_nb(px, py, centroids):
    best = 0
    best_d = np.inf
    for c in range(centroids.shape[0]):
        dx = px - centroids[c, 0]
        dy = py - centroids[c, 1]
        d = dx * dx + dy * dy
        if d < best_d:
            best_d = d
            best = c
    return best


@njit
def assign_nb(points, centroids):
    n = points.shape[0]
    labels = np.empty(n, dtype=np.int64)
    for p in range(n):
        labels[p] = nearest_nb(points[p, 0], points[p, 1], centroids)
    return labels


@njit
def lloyd_step_nb(points, centroids):
    """One assignment + update. Returns (labels, new centroids, counts, inertia)."""
    kc = centroids.shape[0]
    labels = assign_nb(points, centroids)
    sums = np.zeros((kc, 2))
    counts = np.zeros(kc, dtype=np.int64)
    inertia = 0.0
    for p in range(points.shape[0]):
        c = labels[p]
        sums[c, 0] += points[p, 0]
        sums[c, 1] += points[p, 1]
        counts[c] += 1
        dx = points[p, 0] - centroids[c, 0]
        dy = points[p, 1] - centroids[c, 1]
        inertia += dx * dx + dy * dy
    new = centroids.copy()
    for c in range(kc):
        if counts[c] > 0:
            new[c, 0] = sums[c, 0] / counts[c]
            new[c, 1] = sums[c, 1] / counts[c]
    return labels, new, counts, inertia


@njit
def meta_batch_nb(table, s_rows, g_cols, returns, next_rows, discounts, terminal, alpha):
    """Sequential tabular TD updates; ``discounts[b]`` multiplies the bootstrap."""
    for b in range(s_rows.shape[0]):
        target = returns[b]
        if not terminal[b]:
            best = table[next_rows[b], 0]
            for j in range(1, table.shape[1]):
                if table[next_rows[b], j] > best:
                    best = table[next_rows[b], j]
            target += discounts[b] * best
        i, g = s_rows[b], g_cols[b]
        table[i, g] += alpha * (target - table[i, g])


@njit
def meta_slots_nb(table, index_table, width, s0_col, g_col, ret_col, end_col, term_col,
                  steps_col, slots, gamma, power, alpha):
    """``meta_batch`` reading straight from meta-memory columns at ``slots``.

    ``index_table[cell]`` is the meta state of a cell; ``power`` selects
    gamma**steps over plain gamma for the bootstrap.
    """
    n = slots.shape[0]
    s_rows = np.empty(n, dtype=np.int64)
    next_rows = np.empty(n, dtype=np.int64)
    g_cols = np.empty(n, dtype=np.int64)
    returns = np.empty(n)
    discounts = np.empty(n)
    terminal = np.empty(n, dtype=np.bool_)
    for b in range(n):
        i = slots[b]
        s_rows[b] = index_table[s0_col[i, 1] * width + s0_col[i, 0]]
        next_rows[b] = index_table[end_col[i, 1] * width + end_col[i, 0]]
        g_cols[b] = g_col[i]
        returns[b] = ret_col[i]
        discounts[b] = gamma ** steps_col[i] if power else gamma
        terminal[b] = term_col[i]
    meta_batch_nb(table, s_rows, g_cols, returns, next_rows, discounts, terminal, alpha)


# ---------------------------------------------------------------- numpy path

def gaussian_code_np(px, py, centers, sigma):
    d2 = (px - centers[:, 0]) ** 2 + (py - centers[:, 1]) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


def gate_rows_np(px, py, centers, sigma, threshold):
    return np.flatnonzero(gaussian_code_np(px, py, centers, sigma) > threshold).astype(np.int64)


def kwta_mask_np(net, k):
    order = np.argsort(-np.asarray(net), axis=-1, kind="stable")
    won = np.zeros(np.shape(net), dtype=bool)
    np.put_along_axis(won, order[..., :k], True, axis=-1)
    return won


def forward_np(w1, w2, s_code, rows, k, h_out):
    net = w1[rows] @ s_code
    won = kwta_mask_np(net, k)
    h = 1.0 / (1.0 + np.exp(-np.where(won, net, SUPPRESSED)))
    h_out[: len(rows)] = h
    return np.einsum("rah,rh->a", w2[rows], h)


def backprop_np(w1, w2, s_code, rows, h, a, delta, alpha, k):
    h = h[: len(rows)]
    err = delta * w2[rows, a, :] * h * (1.0 - h)
    err = np.where(h > H_FLOOR, err, 0.0)
    w1[rows] += alpha * err[:, :, None] * s_code[None, None, :]
    w2[rows, a, :] += alpha * delta * h


def q_values_np(w1, w2, s_code, rows, k):
    return forward_np(w1, w2, s_code, rows, k, np.empty((len(rows), w1.shape[1])))


def td_batch_np(w1, w2, codes, s_idx, next_idx, goals, actions, rewards, bootstrap,
                gamma, alpha, k, goal_centers, goal_sigma, threshold):
    deltas = np.empty(len(s_idx))
    for b in range(len(s_idx)):
        rows = gate_rows_np(goals[b, 0], goals[b, 1], goal_centers, goal_sigma, threshold)
        target = rewards[b]
        if bootstrap[b]:
            target += gamma * np.max(q_values_np(w1, w2, codes[next_idx[b]], rows, k))
        h = np.empty((len(rows), w1.shape[1]))
        q = forward_np(w1, w2, codes[s_idx[b]], rows, k, h)
        deltas[b] = target - q[actions[b]]
        backprop_np(w1, w2, codes[s_idx[b]], rows, h, actions[b], deltas[b], alpha, k)
    return deltas


def td_slots_np(w1, w2, codes, width, s_col, next_col, goal_col, a_col, r_col, attained_col,
                terminal_col, slots, gamma, alpha, k, goal_centers, goal_sigma, threshold):
    s, sn = s_col[slots], next_col[slots]
    boot = ~(attained_col[slots] | terminal_col[slots])
    td_batch_np(w1, w2, codes, s[:, 1] * width + s[:, 0], sn[:, 1] * width + sn[:, 0],
                goal_col[slots], a_col[slots], r_col[slots], boot, gamma, alpha, k,
                goal_centers, goal_sigma, threshold)


def sarsa_np(w1, w2, code, code_next, rows, a, a_next, reward, terminal, gamma, alpha, k):
    target = reward
    if not terminal:
        target += gamma * q_values_np(w1, w2, code_next, rows, k)[a_next]
    h = np.empty((len(rows), w1.shape[1]))
    q = forward_np(w1, w2, code, rows, k, h)
    delta = target - q[a]
    backprop_np(w1, w2, code, rows, h, a, delta, alpha, k)
    return delta


def assign_np(points, centroids):
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)
    return np.argmin(d2, axis=1).astype(np.int64)


def nearest_np(px, py, centroids):
    return int(assign_np(np.array([[px, py]]), centroids)[0])


def lloyd_step_np(points, centroids):
    kc = centroids.shape[0]
    labels = assign_np(points, centroids)
    counts = np.bincount(labels, minlength=kc).astype(np.int64)
    inertia = float(((points - centroids[labels]) ** 2).sum())
    new = centroids.copy()
    for c in np.flatnonzero(counts):
        new[c] = points[labels == c].mean(axis=0)
    return labels, new, counts, inertia


def meta_batch_np(table, s_rows, g_cols, returns, next_rows, discounts, terminal, alpha):
    # sequential: later samples see earlier updates
    for b in range(len(s_rows)):
        target = returns[b]
        if not terminal[b]:
            target += discounts[b] * table[next_rows[b]].max()
        table[s_rows[b], g_cols[b]] += alpha * (target - table[s_rows[b], g_cols[b]])


def meta_slots_np(table, index_table, width, s0_col, g_col, ret_col, end_col, term_col,
                  steps_col, slots, gamma, power, alpha):
    s0, se = s0_col[slots], end_col[slots]
    steps = steps_col[slots].astype(np.float64)
    discounts = gamma ** steps if power else np.full(len(slots), gamma)
    meta_batch_np(table, index_table[s0[:, 1] * width + s0[:, 0]], g_col[slots], ret_col[slots],
                  index_table[se[:, 1] * width + se[:, 0]], discounts, term_col[slots], alpha)


# ------------------------------------------------------- flat SARSA episodes

def _make_sarsa_episode(q_values_fn, sarsa_fn):
    """Build one on-policy episode of the key/lock task for a given backend.

    The environment rules are inlined so the whole episode runs inside one
    compiled call. ``u`` and ``rand_a`` hold the pre-drawn exploration numbers
    for decisions 0..max_steps; decision t uses ``u[t]`` and ``rand_a[t]``.
    """
    def sarsa_episode(w1, w2, codes, rows, k, walls, start_x, start_y, key_x, key_y,
                      goal_x, goal_y, completion_reward, max_steps, epsilon, u, rand_a,
                      gamma, alpha, actions_out):
        height, width = walls.shape
        x, y = start_x, start_y
        has_key = False
        ret = 0.0
        success = False
        got_key = False
        a = rand_a[0]
        if u[0] >= epsilon:
            a = np.argmax(q_values_fn(w1, w2, codes[y * width + x], rows, k))
        steps = 0
        for t in range(max_steps):
            actions_out[t] = a
            nx, ny = x, y
            if a == 0:
                ny = y - 1
            elif a == 1:
                ny = y + 1
            elif a == 2:
                nx = x + 1
            else:
                nx = x - 1
            if nx < 0 or ny < 0 or nx >= width or ny >= height or walls[ny, nx]:
                nx, ny = x, y
                r = -2.0
            else:
                r = 0.0
                if nx == key_x and ny == key_y and not has_key:
                    r = 10.0
                    has_key = True
                    got_key = True
                elif nx == goal_x and ny == goal_y and has_key:
                    r = completion_reward
                    success = True
            ret += r
            steps += 1
            c, cn = codes[y * width + x], codes[ny * width + nx]
            if success:
                sarsa_fn(w1, w2, c, cn, rows, a, 0, r, True, gamma, alpha, k)
                break
            a_next = rand_a[t + 1]
            if u[t + 1] >= epsilon:
                a_next = np.argmax(q_values_fn(w1, w2, cn, rows, k))
            sarsa_fn(w1, w2, c, cn, rows, a, a_next, r, False, gamma, alpha, k)
            x, y, a = nx, ny, a_next
        return ret, steps, success, got_key
    return sarsa_episode


sarsa_episode_nb = njit(_make_sarsa_episode(q_values_nb, sarsa_nb))
sarsa_episode_np = _make_sarsa_episode(q_values_np, sarsa_np)


gaussian_code = pick(gaussian_code_nb, gaussian_code_np)
gate_rows = pick(gate_rows_nb, gate_rows_np)
kwta_mask = pick(kwta_mask_nb, kwta_mask_np)
forward = pick(forward_nb, forward_np)
backprop = pick(backprop_nb, backprop_np)
q_values = pick(q_values_nb, q_values_np)
td_batch = pick(td_batch_nb, td_batch_np)
td_slots = pick(td_slots_nb, td_slots_np)
meta_slots = pick(meta_slots_nb, meta_slots_np)
sarsa = pick(sarsa_nb, sarsa_np)
assign = pick(assign_nb, assign_np)
nearest = pick(nearest_nb, nearest_np)
lloyd_step = pick(lloyd_step_nb, lloyd_step_np)
meta_batch = pick(meta_batch_nb, meta_batch_np)
sarsa_episode = pick(sarsa_episode_nb, sarsa_episode_np)
