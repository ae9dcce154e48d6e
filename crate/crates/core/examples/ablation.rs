//! The cumulative ablation grid at a very small budget.

use avssl::config::ExperimentConfig;
use avssl::eval::{cumulative_rows, run_ablation, AblationBudget};

fn main() -> avssl::Result<()> {
    let budget = AblationBudget {
        pretrain_epochs: 3,
        finetune_epochs: 3,
        train_samples: 4,
        heldout_samples: 4,
        beam: 2,
        ..AblationBudget::default()
    };
    let report = run_ablation(&ExperimentConfig::default(), &cumulative_rows(), &budget)?;
    print!("{}", report.to_table());
    Ok(())
}
