"""Simulation and statistical verification of Brownian flows on the line.

Three coupled-flow models driven by half-line white noises: a coalescing
flow with independent noise on each half line, the diffusive kernel
obtained by conditioning it on the positive-side noise, and the coalescing
flow of that positive-side noise alone.  Submodules:

``noise``      seeded increment streams and covariance kinds
``flow_pm``    the two-sided coalescing flow
``flow_plus``  positive-side flows and kernel estimation by filtering
``wedge``      time changes, local times, the pair Laplace identity
``chaos``      heat semigroup and Wiener chaos reconstruction
``verify``     statistical test harness
``cli``        experiment runner (``brownflow run <config>``)
"""

__version__ = "0.1.0"
