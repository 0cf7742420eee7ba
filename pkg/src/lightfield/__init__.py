"""Neural light fields over Plucker ray coordinates.

Subpackages cover ray-manifold geometry, a small tape-based autodiff core,
the light field MLP plus its latent-code hypernetwork, rendering (single
evaluation per ray, with an instrumented ray-marching baseline), analytic
sparse-depth extraction from field derivatives, procedural Lambertian
oracle scenes, image/depth metrics, and a CLI + HTTP render service.
"""

__version__ = "0.1.0"
