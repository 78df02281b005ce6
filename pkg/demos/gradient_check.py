"""Check every analytic gradient path against central finite differences.

The loss gradients travel through the network, the quaternion map, the
global ARAP solve (via its adjoint) and the unit printing directions. This
script runs the finite-difference comparison on a ~160-tet scene, then
deliberately scales the rotation Jacobian by 1% to show that the check fails
loudly when the backward pass is wrong.
"""

from curvedslice import deformation, gradcheck

results, secs = gradcheck.run_all(seed=0, max_params=200)
for r in results:
    print(r.row())
print(f"checked in {secs:.1f} s\n")

real = deformation.quat_matrix_jacobian
deformation.quat_matrix_jacobian = lambda q: 1.01 * real(q)
try:
    results, _ = gradcheck.run_all(seed=0, max_params=200)
finally:
    deformation.quat_matrix_jacobian = real
print("with a corrupted rotation Jacobian:")
for r in results:
    print(r.row())
