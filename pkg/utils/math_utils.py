import numpy as np


def sigmoid(x):
    """
    Logistic activation used for opacity and blend weight.

    Args:
        x (float | np.ndarray): Raw parameter value(s).

    Returns:
        float | np.ndarray: Activated value(s) in (0, 1).
    """
    return 1.0 / (1.0 + np.exp(-x))


def inverse_sigmoid(y):
    y = np.clip(y, 1e-12, 1.0 - 1e-12)
    return np.log(y / (1.0 - y))


def normalize(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """
    Normalizes vectors along an axis, leaving zero vectors untouched.

    Args:
        v (np.ndarray): Array of vectors.
        axis (int): Axis holding the vector components.

    Returns:
        np.ndarray: Unit vectors (zero where the input norm is zero).
    """
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return np.divide(v, norm, out=np.zeros_like(v, dtype=float), where=norm > 0)


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """
    Converts (w, x, y, z) quaternions to rotation matrices after normalizing them.

    Args:
        q (np.ndarray): Quaternion(s) of shape (4,) or (N, 4).

    Returns:
        np.ndarray: Rotation matrix/matrices of shape (3, 3) or (N, 3, 3).
    """
    q = np.asarray(q, dtype=float)
    qn = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def rotation_jacobian(qn: np.ndarray) -> np.ndarray:
    """
    Derivative of the rotation matrix with respect to a unit quaternion.

    Args:
        qn (np.ndarray): Unit quaternion (w, x, y, z).

    Returns:
        np.ndarray: Array J of shape (4, 3, 3) with J[k] = dR/dq_k.
    """
    w, x, y, z = qn
    return 2.0 * np.array([
        [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
    ])


def quaternion_grad(q: np.ndarray, d_rot: np.ndarray) -> np.ndarray:
    """
    Pulls a gradient on the rotation matrix back to the raw (unnormalized) quaternion.

    Args:
        q (np.ndarray): Raw quaternion (w, x, y, z).
        d_rot (np.ndarray): dL/dR, shape (3, 3).

    Returns:
        np.ndarray: dL/dq, shape (4,).
    """
    norm = np.linalg.norm(q)
    qn = q / norm
    d_qn = np.einsum("kij,ij->k", rotation_jacobian(qn), d_rot)
    # project out the radial component of the normalization
    return (d_qn - qn * np.dot(qn, d_qn)) / norm


def random_quaternions(rng: np.random.Generator, count: int) -> np.ndarray:
    q = rng.normal(size=(count, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)
