pub mod feasibility;
pub mod growth;
pub mod synthesis;

pub use feasibility::{solve_feasibility, AffineLmi, Feasibility, SolverOptions};
pub use growth::{compute_mu, growth_feasible, growth_params, GrowthParams};
pub use synthesis::{synth_gain, verify_uniform_decay, GainCertificate, GainRecord};
