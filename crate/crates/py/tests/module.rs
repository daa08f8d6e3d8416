use pyo3::prelude::*;

#[test]
fn module_exposes_main_types() {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "gadk").unwrap();
        gadk_py::register(&m).unwrap();
        for name in ["Graph", "LanguageModel", "StateCache", "Adapter", "accuracy", "roc_auc", "gradcheck", "run_experiment"] {
            assert!(m.hasattr(name).unwrap(), "{name}");
        }
        let auc: f64 = m
            .getattr("roc_auc")
            .unwrap()
            .call1((vec![0.1, 0.4, 0.35, 0.8], vec![false, false, true, true]))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(auc, 0.75);
        let err = m.getattr("accuracy").unwrap().call1((vec![0usize], vec![0usize, 1])).unwrap_err();
        assert!(err.to_string().contains("dimension"));
    });
}
