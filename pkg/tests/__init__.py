# FPMC 测试模块
