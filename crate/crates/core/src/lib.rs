//! Joint optimization of battery capacity and day-ahead bidding for a
//! renewable producer with a battery.

pub mod design_optimizer;
pub mod drqn_agent;
pub mod market_env;
pub mod nn;
pub mod report;
pub mod timeseries;
pub mod trainer;
