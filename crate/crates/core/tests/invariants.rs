mod properties;

const CASES: u32 = 256;

#[test]
fn softmax_rows_sum_to_one() {
    properties::softmax_rows_sum_to_one(CASES).unwrap();
}

#[test]
fn softmax_shift_invariant() {
    properties::softmax_shift_invariant(CASES).unwrap();
}

#[test]
fn argmax_temperature_invariant() {
    properties::argmax_temperature_invariant(CASES).unwrap();
}

#[test]
fn attention_permutation_equivariant() {
    properties::attention_permutation_equivariant(CASES).unwrap();
}

#[test]
fn attention_convex_bounds() {
    properties::attention_convex_bounds(CASES).unwrap();
}

#[test]
fn cosine_scale_invariant() {
    properties::cosine_scale_invariant(CASES).unwrap();
}

#[test]
fn accuracy_monotone_in_delta() {
    properties::accuracy_monotone_in_delta(CASES).unwrap();
}
