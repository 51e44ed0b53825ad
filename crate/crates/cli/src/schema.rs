use serde_json::Value;

use crate::error::CliError;

/// The published run-configuration schema.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../schema/run-config.schema.json");

/// Checks `instance` against the run-configuration schema and lists every
/// violation as `<json pointer>: <message>`.
pub fn validate(instance: &Value) -> Result<(), CliError> {
    let schema: Value = serde_json::from_str(RUN_CONFIG_SCHEMA).expect("bundled schema is JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let errors: Vec<String> = validator
        .iter_errors(instance)
        .map(|e| format!("{}: {e}", e.instance_path()))
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Schema(errors))
    }
}
