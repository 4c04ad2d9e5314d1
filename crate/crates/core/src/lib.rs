pub mod closure;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod gp;
pub mod linalg;
pub mod med;
pub mod quadrature;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

pub type MomentVectorF32 = med::MomentVector<f32>;
pub type MomentVectorF64 = med::MomentVector<f64>;
pub type LagrangeVectorF32 = med::LagrangeVector<f32>;
pub type LagrangeVectorF64 = med::LagrangeVector<f64>;
pub type MaxEntDensityF32 = med::MaxEntDensity<f32>;
pub type MaxEntDensityF64 = med::MaxEntDensity<f64>;
pub type QuadratureRuleF32 = quadrature::QuadratureRule<f32>;
pub type QuadratureRuleF64 = quadrature::QuadratureRule<f64>;
pub type VelocityDomainF32 = quadrature::VelocityDomain<f32>;
pub type VelocityDomainF64 = quadrature::VelocityDomain<f64>;
pub type SolverOptionsF32 = med::SolverOptions<f32>;
pub type SolverOptionsF64 = med::SolverOptions<f64>;
pub type KernelSpecF32 = gp::KernelSpec<f32>;
pub type KernelSpecF64 = gp::KernelSpec<f64>;
pub type GpOutputModelF32 = gp::GpOutputModel<f32>;
pub type GpOutputModelF64 = gp::GpOutputModel<f64>;
