pub mod error; pub mod image; pub mod compose; pub mod pngio; pub mod seed; pub mod scene; pub mod dataset; pub mod diffusion; pub mod eval; pub mod distill; pub mod checkpoint; pub mod config; pub mod pipeline;
