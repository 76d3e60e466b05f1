//! Flow-matching objective, optimizer and training loop.

mod optim;
mod path;
mod step;
mod toy;

pub use optim::{lr_schedule, AdamW, AdamWConfig};
pub use path::{fm_loss, fm_loss_var, interpolate_path, target_velocity};
pub use step::{train_step, TaskMix, Trainer, TrainConfig};
pub use toy::{train_toy, ToyConfig, ToyVelocity};
