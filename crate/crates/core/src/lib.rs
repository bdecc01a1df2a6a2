//! Numerical toolkit for the fractional nonlinear Fokker–Planck equation
//! `u_t + (−Δ)^s β(u) + div(D b(u) u) = 0` on a periodic box.

pub mod quadrature;
pub mod spectral;
pub mod coefficients;
pub mod krylov;
pub mod resolvent;
pub mod evolution;
pub mod kernel;
pub mod gauge;
pub mod particles;
pub mod io;
