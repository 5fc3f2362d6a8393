use knn_core::genotype::{load_genotypes, write_genotypes, TableFormat};
use knn_core::simulate::gen_genotypes;

#[test]
fn file_round_trip() {
    let g = gen_genotypes(7, 9, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for (name, format) in [("g.csv", TableFormat::Csv), ("g.tsv", TableFormat::Tsv)] {
        let path = dir.path().join(name);
        write_genotypes(&g, std::fs::File::create(&path).unwrap(), format).unwrap();
        assert_eq!(TableFormat::from_path(&path), format);
        let back = load_genotypes(&path, format).unwrap();
        assert_eq!(back.values(), g.values());
        assert_eq!(back.sample_ids(), g.sample_ids());
        assert_eq!(back.snp_ids(), g.snp_ids());
    }
}

#[test]
fn malformed_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "sample,s1,s2\na,0,1\nb,2,3\n").unwrap();
    assert!(load_genotypes(&path, TableFormat::Csv).is_err());
    std::fs::write(&path, "sample,s1,s2\na,0,1\nb,2\n").unwrap();
    assert!(load_genotypes(&path, TableFormat::Csv).is_err());
    assert!(load_genotypes(&dir.path().join("absent.csv"), TableFormat::Csv).is_err());
}
