//! Contrastive, classification and box-regression objectives.

mod contrastive;
mod focal;
mod regression;
mod total;

pub use contrastive::{cosine_sim, nt_xent, nt_xent_tensor, partners, ContrastiveBatch};
pub use focal::{focal_loss, focal_loss_tensor, FocalParams, PROB_EPS};
pub use regression::{box_regression_loss, box_regression_loss_tensor, giou_tensor, l1_tensor};
pub use total::{total_loss, LossBreakdown, LossConfig, TotalLoss};
