use georeg::attention::{projection_stage, AttentionMode};
use georeg_bench::{attention_fixture, planted, random_cloud, random_matrix};

#[test]
fn fixtures_are_reproducible() {
    assert_eq!(random_cloud(50, 3), random_cloud(50, 3));
    assert_ne!(random_cloud(50, 3), random_cloud(50, 4));
    assert_eq!(random_matrix(4, 5, 1), random_matrix(4, 5, 1));
}

#[test]
fn planted_set_has_the_advertised_size() {
    let set = planted(0);
    assert_eq!(set.all.len(), 5000);
    assert_eq!(set.inlier.iter().filter(|&&b| b).count(), 2000);
}

#[test]
fn attention_fixture_feeds_the_projection_stage() {
    for mode in [AttentionMode::Standard, AttentionMode::Shared] {
        let f = attention_fixture(16, 32, mode);
        assert_eq!(f.x.shape(), &[16, 32]);
        assert_eq!(f.r.shape(), &[16 * 16, 32]);
        projection_stage(&f.x, &f.r, &f.params, 0, mode).unwrap();
    }
}
