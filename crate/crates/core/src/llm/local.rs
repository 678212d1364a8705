//! Cost of running the relevance scanner on rented hardware.
//!
//! Dense transformers spend about `2 * params` FLOPs per token, so
//! throughput follows from peak FLOPs and an assumed utilization.

use serde::{Deserialize, Serialize};

use crate::types::ContractError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalComputeSpec {
    pub device_count: u32,
    pub peak_tflops_per_device: f64,
    /// Model FLOPs utilization in (0, 1].
    pub utilization: f64,
    pub model_params: f64,
    pub total_tokens: f64,
    pub usd_per_hour: f64,
}

impl LocalComputeSpec {
    /// 8x L40S serving a 32B model at 20% MFU, $8.24/hour.
    pub fn l40s_node(total_tokens: f64) -> Self {
        Self {
            device_count: 8,
            peak_tflops_per_device: 362.05,
            utilization: 0.2,
            model_params: 32e9,
            total_tokens,
            usd_per_hour: 8.24,
        }
    }

    pub fn validate(&self) -> Result<(), ContractError> {
        let positive = self.device_count > 0
            && self.peak_tflops_per_device > 0.0
            && self.model_params > 0.0
            && self.usd_per_hour > 0.0
            && self.utilization > 0.0;
        if !positive {
            return Err(ContractError::Invalid(format!(
                "local compute fields must be positive: {self:?}"
            )));
        }
        if self.utilization > 1.0 {
            return Err(ContractError::Invalid("utilization must be <= 1".into()));
        }
        if self.total_tokens.is_nan() || self.total_tokens < 0.0 {
            return Err(ContractError::Invalid("total_tokens must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalCostEstimate {
    pub tokens_per_second: f64,
    pub hours: f64,
    pub usd: f64,
}

pub fn estimate_local_cost(spec: &LocalComputeSpec) -> Result<LocalCostEstimate, ContractError> {
    spec.validate()?;
    let node_flops = spec.device_count as f64 * spec.peak_tflops_per_device * 1e12;
    let flops_per_token = 2.0 * spec.model_params;
    let tokens_per_second = spec.utilization * node_flops / flops_per_token;
    let hours = spec.total_tokens / tokens_per_second / 3600.0;
    Ok(LocalCostEstimate {
        tokens_per_second,
        hours,
        usd: hours * spec.usd_per_hour,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_device_hand_arithmetic() {
        // 1.0 * 1 * 2e12 / (2 * 1e9) = 1000 tokens/s
        let spec = LocalComputeSpec {
            device_count: 1,
            peak_tflops_per_device: 2.0,
            utilization: 1.0,
            model_params: 1e9,
            total_tokens: 3.6e6,
            usd_per_hour: 1.0,
        };
        let est = estimate_local_cost(&spec).unwrap();
        assert!((est.tokens_per_second - 1000.0).abs() < 1e-9);
        assert!((est.hours - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        let est = estimate_local_cost(&LocalComputeSpec::l40s_node(0.0)).unwrap();
        assert_eq!(est.hours, 0.0);
        assert_eq!(est.usd, 0.0);
    }

    #[test]
    fn doubling_tokens_doubles_cost() {
        let a = estimate_local_cost(&LocalComputeSpec::l40s_node(1.0e9)).unwrap();
        let b = estimate_local_cost(&LocalComputeSpec::l40s_node(2.0e9)).unwrap();
        assert_eq!(b.usd, 2.0 * a.usd);
    }

    #[test]
    fn rejects_nonpositive_fields() {
        let mut spec = LocalComputeSpec::l40s_node(1.0);
        spec.device_count = 0;
        assert!(estimate_local_cost(&spec).is_err());
        let mut spec = LocalComputeSpec::l40s_node(1.0);
        spec.utilization = 1.5;
        assert!(estimate_local_cost(&spec).is_err());
    }
}
